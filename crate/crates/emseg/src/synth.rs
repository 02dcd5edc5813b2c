//! Synthetic scenes with known true streamlines: random-walk polylines, a
//! distance-kernel signal channel plus noise distractors, and error-model
//! corruption of the labels with controllable spatial autocorrelation.
//!
//! Scenes stand in for real feature/label data so the EM loop can be
//! verified end to end against ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{chunk_polyline, Point, PolarErrorModel, Polyline};
use crate::raster::FeatureGrid;

/// Margin kept between generated lines and the grid border, in pixels.
const BORDER_MARGIN: f64 = 4.0;
/// Vertex spacing of generated random walks, in pixels.
const VERTEX_SPACING: f64 = 2.0;

/// Everything needed to build a scene deterministically from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Number of streamlines traversing the grid.
    pub n_lines: usize,
    /// Standard deviation of the per-step turn angle, radians.
    pub turn_std: f64,
    /// Peak value of the stream signal channel.
    pub amplitude: f64,
    /// Gaussian noise added to every channel.
    pub noise_std: f64,
    /// Pure-noise channels appended after the signal channel.
    pub n_distractors: usize,
    /// Width of the signal falloff kernel and of the label buffer, pixels.
    pub buffer: f64,
    /// Error model from which per-chunk corruption offsets are drawn.
    pub corruption: PolarErrorModel,
    /// Lag-1 autocorrelation of adjacent chunk offsets, in [0, 1).
    pub phi: f64,
    /// Chunk length used when corrupting labels, meters.
    pub chunk_len: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// The default scene: 256x256, 3 channels (1 signal + 2 distractors),
    /// 2 streamlines, AR(1) corruption with phi = 0.7 and offsets up to 6 px.
    pub fn acceptance_default() -> SceneSpec {
        SceneSpec {
            height: 256,
            width: 256,
            n_lines: 2,
            turn_std: 0.12,
            amplitude: 3.0,
            noise_std: 1.0,
            n_distractors: 2,
            buffer: 2.0,
            corruption: PolarErrorModel::new(1.0, std::f64::consts::FRAC_PI_4, 6.0)
                .expect("valid corruption model"),
            phi: 0.7,
            chunk_len: 20.0,
            seed: 17,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 64 || self.width < 64 {
            return Err(Error::domain(format!(
                "scene dims must be >= 64, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::domain(format!(
                "amplitude must be > 0, got {}",
                self.amplitude
            )));
        }
        if !(0.0..1.0).contains(&self.phi) {
            return Err(Error::domain(format!(
                "phi must be in [0, 1), got {}",
                self.phi
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::domain(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if !(self.turn_std >= 0.0) {
            return Err(Error::domain(format!(
                "turn_std must be >= 0, got {}",
                self.turn_std
            )));
        }
        if !(self.buffer > 0.0) {
            return Err(Error::domain(format!(
                "buffer must be > 0, got {}",
                self.buffer
            )));
        }
        if !(self.chunk_len > 0.0) {
            return Err(Error::domain(format!(
                "chunk_len must be > 0, got {}",
                self.chunk_len
            )));
        }
        if self.n_lines == 0 {
            return Err(Error::domain("n_lines must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        1 + self.n_distractors
    }

    /// Key=value echo of the spec, one entry per line.
    pub fn echo(&self) -> String {
        format!(
            "height = {}\nwidth = {}\nn_lines = {}\nturn_std = {}\namplitude = {}\n\
             noise_std = {}\nn_distractors = {}\nbuffer = {}\ncorruption_delta_rho = {}\n\
             corruption_delta_theta = {}\ncorruption_rho_max = {}\nphi = {}\nchunk_len = {}\n\
             seed = {}\n",
            self.height,
            self.width,
            self.n_lines,
            self.turn_std,
            self.amplitude,
            self.noise_std,
            self.n_distractors,
            self.buffer,
            self.corruption.delta_rho(),
            self.corruption.delta_theta(),
            self.corruption.rho_max(),
            self.phi,
            self.chunk_len,
            self.seed
        )
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates smooth random-walk polylines that traverse the grid from the top
/// margin to the bottom margin: vertex spacing 2 px, per-step turn angle
/// drawn with `turn_std`, heading steered away from the side margins.
/// Deterministic for a given rng. A zero turn std yields straight lines.
pub fn generate_truth_polylines(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Polyline>> {
    spec.validate()?;
    let h = spec.height as f64;
    let w = spec.width as f64;
    if w <= 2.0 * BORDER_MARGIN + 2.0 || h <= 2.0 * BORDER_MARGIN + 2.0 {
        return Err(Error::Capacity {
            context: "grid too small to place lines inside the border margin".to_string(),
            requested: spec.n_lines,
            achieved: 0,
        });
    }
    let max_steps = (10.0 * h / VERTEX_SPACING) as usize;
    let mut lines = Vec::with_capacity(spec.n_lines);
    for _ in 0..spec.n_lines {
        let x0 = rng.gen_range(BORDER_MARGIN + 4.0..w - BORDER_MARGIN - 4.0);
        let mut heading = std::f64::consts::FRAC_PI_2; // straight down
        let mut cur = Point { x: x0, y: BORDER_MARGIN };
        let mut vertices = vec![cur];
        for _ in 0..max_steps {
            heading += gaussian(rng) * spec.turn_std;
            // Keep descending and away from the side walls.
            let max_tilt = 1.0;
            heading = heading.clamp(
                std::f64::consts::FRAC_PI_2 - max_tilt,
                std::f64::consts::FRAC_PI_2 + max_tilt,
            );
            let mut next = Point {
                x: cur.x + VERTEX_SPACING * heading.cos(),
                y: cur.y + VERTEX_SPACING * heading.sin(),
            };
            if next.x < BORDER_MARGIN || next.x > w - BORDER_MARGIN {
                heading = std::f64::consts::PI - heading;
                next = Point {
                    x: cur.x + VERTEX_SPACING * heading.cos(),
                    y: cur.y + VERTEX_SPACING * heading.sin(),
                };
            }
            if next.y >= h - BORDER_MARGIN {
                vertices.push(Point {
                    x: next.x.clamp(BORDER_MARGIN, w - BORDER_MARGIN),
                    y: h - BORDER_MARGIN,
                });
                break;
            }
            vertices.push(next);
            cur = next;
        }
        let line = Polyline::new(vertices)?;
        if line.arc_length() < h - 2.0 * BORDER_MARGIN - VERTEX_SPACING {
            return Err(Error::Capacity {
                context: "line terminated before traversing the grid".to_string(),
                requested: spec.n_lines,
                achieved: lines.len(),
            });
        }
        lines.push(line);
    }
    Ok(lines)
}

/// Renders the feature raster: channel 0 is
/// `amplitude * exp(-d^2 / (2 * buffer^2))` plus Gaussian noise, where `d` is
/// the distance from the pixel center to the nearest line; remaining channels
/// are pure noise distractors.
pub fn render_features(
    lines: &[Polyline],
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureGrid> {
    spec.validate()?;
    let mut grid = FeatureGrid::zeros(spec.height, spec.width, spec.channels(), 1.0)?;
    let denom = 2.0 * spec.buffer * spec.buffer;
    for r in 0..spec.height {
        for c in 0..spec.width {
            let p = Point {
                x: c as f64 + 0.5,
                y: r as f64 + 0.5,
            };
            let d = lines
                .iter()
                .map(|l| l.distance_to(p))
                .fold(f64::INFINITY, f64::min);
            let signal = if d.is_finite() {
                spec.amplitude * (-d * d / denom).exp()
            } else {
                0.0
            };
            grid.set(r, c, 0, signal);
        }
    }
    // Noise is drawn in row-major channel order so scenes are reproducible.
    for ch in 0..spec.channels() {
        for r in 0..spec.height {
            for c in 0..spec.width {
                let noise = gaussian(rng) * spec.noise_std;
                let v = grid.get(r, c, ch) + noise;
                grid.set(r, c, ch, v);
            }
        }
    }
    Ok(grid)
}

/// Draws the signed per-chunk offsets of one line as an AR(1) sequence
/// snapped to the error-model grid and clipped to the support.
fn draw_offsets(
    n_chunks: usize,
    model: &PolarErrorModel,
    phi: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let rho_max = model.rho_max();
    let delta = model.delta_rho();
    // Innovation half-width chosen so the stationary std is rho_max / 2;
    // clipping at the support edge then stays rare.
    let a = rho_max * (3.0 * (1.0 - phi * phi)).sqrt() / 2.0;
    let snap = |x: f64| ((x / delta).round() * delta).clamp(-rho_max, rho_max);
    let mut offsets = Vec::with_capacity(n_chunks);
    let mut state = if a > 0.0 {
        rng.gen_range(-a..a) / (1.0 - phi * phi).sqrt()
    } else {
        0.0
    };
    offsets.push(snap(state));
    for _ in 1..n_chunks {
        let innovation = if a > 0.0 { rng.gen_range(-a..a) } else { 0.0 };
        state = phi * state + innovation;
        offsets.push(snap(state));
    }
    offsets
}

/// Corrupts true lines into observed noisy lines: chunks each line, shifts
/// every chunk rigidly along its chord normal by an AR(1) offset sequence
/// (`offset_t = phi * offset_{t-1} + innovation`, snapped to the error grid
/// and clipped to the support), then re-joins chunk endpoints by blending the
/// junction correction over the two nearest vertices.
pub fn corrupt_labels(
    lines: &[Polyline],
    model: &PolarErrorModel,
    phi: f64,
    chunk_len: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Polyline>> {
    if !(0.0..1.0).contains(&phi) {
        return Err(Error::domain(format!("phi must be in [0, 1), got {phi}")));
    }
    if model.rho_max() == 0.0 {
        return Ok(lines.to_vec());
    }
    let mut corrupted = Vec::with_capacity(lines.len());
    for line in lines {
        let chunks = chunk_polyline(line, chunk_len)?;
        let offsets = draw_offsets(chunks.len(), model, phi, rng);
        // Rigid translation of each chunk's vertices.
        let mut moved: Vec<Vec<Point>> = Vec::with_capacity(chunks.len());
        for (chunk, &offset) in chunks.iter().zip(&offsets) {
            let n = chunk.normal()?;
            moved.push(
                chunk
                    .vertices()
                    .iter()
                    .map(|v| v.translate(offset * n.0, offset * n.1))
                    .collect(),
            );
        }
        // Re-join junctions: both sides meet at the midpoint of their two
        // displaced copies, with the correction blended over 2 vertices.
        for k in 0..moved.len().saturating_sub(1) {
            let end = *moved[k].last().expect("chunk has vertices");
            let start = moved[k + 1][0];
            let joint = Point {
                x: 0.5 * (end.x + start.x),
                y: 0.5 * (end.y + start.y),
            };
            let blend_tail = (joint.x - end.x, joint.y - end.y);
            let m = moved[k].len();
            moved[k][m - 1] = joint;
            if m >= 3 {
                moved[k][m - 2] =
                    moved[k][m - 2].translate(0.5 * blend_tail.0, 0.5 * blend_tail.1);
            }
            let blend_head = (joint.x - start.x, joint.y - start.y);
            moved[k + 1][0] = joint;
            if moved[k + 1].len() >= 3 {
                moved[k + 1][1] =
                    moved[k + 1][1].translate(0.5 * blend_head.0, 0.5 * blend_head.1);
            }
        }
        let mut vertices: Vec<Point> = Vec::new();
        for (k, part) in moved.iter().enumerate() {
            let skip = usize::from(k > 0); // shared junction vertex
            vertices.extend_from_slice(&part[skip..]);
        }
        vertices.dedup_by(|a, b| a.x == b.x && a.y == b.y);
        corrupted.push(Polyline::new(vertices)?);
    }
    Ok(corrupted)
}

/// A fully generated scene: features, truth lines, and corrupted lines.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub features: FeatureGrid,
    pub truth: Vec<Polyline>,
    pub noisy: Vec<Polyline>,
}

/// Builds the whole scene from the spec's seed: truth lines, features, and
/// corrupted labels, each from an independent substream.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut line_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E3779B97F4A7C15));
    let truth = generate_truth_polylines(spec, &mut line_rng)?;
    let mut feat_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1).wrapping_mul(0x9E3779B97F4A7C15));
    let features = render_features(&truth, spec, &mut feat_rng)?;
    let mut corrupt_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2).wrapping_mul(0x9E3779B97F4A7C15));
    let noisy = corrupt_labels(
        &truth,
        &spec.corruption,
        spec.phi,
        spec.chunk_len,
        &mut corrupt_rng,
    )?;
    Ok(Scene {
        spec: spec.clone(),
        features,
        truth,
        noisy,
    })
}
