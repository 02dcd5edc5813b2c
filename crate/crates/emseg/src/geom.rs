//! Geometric label machinery: points, polylines, the polar-grid location
//! error model, fixed-arc-length chunking, and perpendicular-shift candidate
//! generation.
//!
//! Coordinates are in pixel units (1 pixel = 1 meter by convention, with the
//! actual scale carried separately as meters per pixel). All operations here
//! are pure functions of their inputs and safe to call from parallel workers.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for on-grid checks of error offsets.
pub const GRID_TOL: f64 = 1e-9;

/// A 2-D location in pixel coordinates. `x` runs along columns, `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::domain(format!(
                "point coordinates must be finite, got ({x}, {y})"
            )));
        }
        Ok(Point { x, y })
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn translate(self, dx: f64, dy: f64) -> Point {
        Point {
            x: self.x + dx,
            y: self.y + dy,
        }
    }
}

/// Squared distance from `p` to the segment `a`-`b`.
pub(crate) fn point_segment_dist2(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.x + t * dx, a.y + t * dy);
    (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy)
}

/// An ordered open polyline with at least two vertices and positive length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    vertices: Vec<Point>,
}

impl Polyline {
    /// Validates that the vertex sequence forms a proper polyline:
    /// at least two vertices, no coincident consecutive pair.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::domain(format!(
                "polyline needs >= 2 vertices, got {}",
                vertices.len()
            )));
        }
        for (i, pair) in vertices.windows(2).enumerate() {
            if pair[0].x == pair[1].x && pair[0].y == pair[1].y {
                return Err(Error::domain(format!(
                    "coincident consecutive vertices at index {i}"
                )));
            }
        }
        Ok(Polyline { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn arc_length(&self) -> f64 {
        self.vertices.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Polyline {
        Polyline {
            vertices: self.vertices.iter().map(|v| v.translate(dx, dy)).collect(),
        }
    }

    /// Distance from `p` to the nearest point on this polyline.
    pub fn distance_to(&self, p: Point) -> f64 {
        self.vertices
            .windows(2)
            .map(|w| point_segment_dist2(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }
}

/// Discretized polar model of label location error.
///
/// An observed point deviates from its true location by distance
/// `rho = k_rho * delta_rho` at angle `theta = k_theta * delta_theta`, with
/// `rho` uniform on `[0, rho_max]` and `theta` uniform on `[0, 2*pi)`. The
/// zero-distance cell is counted once (the angle is undefined at the origin),
/// so the grid has `1 + (n_rho - 1) * n_theta` cells of equal mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarErrorModel {
    delta_rho: f64,
    delta_theta: f64,
    rho_max: f64,
    n_rho: usize,
    n_theta: usize,
}

impl PolarErrorModel {
    pub fn new(delta_rho: f64, delta_theta: f64, rho_max: f64) -> Result<Self> {
        if !(delta_rho > 0.0) || !delta_rho.is_finite() {
            return Err(Error::domain(format!(
                "delta_rho must be > 0, got {delta_rho}"
            )));
        }
        if !(delta_theta > 0.0) || !delta_theta.is_finite() {
            return Err(Error::domain(format!(
                "delta_theta must be > 0, got {delta_theta}"
            )));
        }
        if !(rho_max >= 0.0) || !rho_max.is_finite() {
            return Err(Error::domain(format!(
                "rho_max must be >= 0, got {rho_max}"
            )));
        }
        let n_theta_f = TAU / delta_theta;
        let n_theta = n_theta_f.round() as usize;
        if n_theta == 0 || (n_theta as f64 * delta_theta - TAU).abs() > GRID_TOL {
            return Err(Error::domain(format!(
                "delta_theta {delta_theta} does not divide 2*pi evenly"
            )));
        }
        let n_rho = (rho_max / delta_rho + GRID_TOL).floor() as usize + 1;
        Ok(PolarErrorModel {
            delta_rho,
            delta_theta,
            rho_max,
            n_rho,
            n_theta,
        })
    }

    pub fn delta_rho(&self) -> f64 {
        self.delta_rho
    }

    pub fn delta_theta(&self) -> f64 {
        self.delta_theta
    }

    pub fn rho_max(&self) -> f64 {
        self.rho_max
    }

    /// Number of admissible `k_rho` values (including zero).
    pub fn n_rho(&self) -> usize {
        self.n_rho
    }

    /// Number of admissible `k_theta` values.
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    /// Number of distinct cells of the discrete error distribution. The
    /// `rho = 0` cell appears once, not once per angle.
    pub fn cell_count(&self) -> usize {
        1 + (self.n_rho - 1) * self.n_theta
    }

    /// Displacement `(rho*cos(theta), rho*sin(theta))` of cell
    /// `(k_rho, k_theta)`. Adding the result to a true point yields the
    /// observed point.
    pub fn polar_to_offset(&self, k_rho: usize, k_theta: usize) -> Result<(f64, f64)> {
        if k_rho >= self.n_rho {
            return Err(Error::domain(format!(
                "k_rho {k_rho} out of range: k_rho * delta_rho must be <= rho_max {} (k_rho < {})",
                self.rho_max, self.n_rho
            )));
        }
        if k_theta >= self.n_theta {
            return Err(Error::domain(format!(
                "k_theta {k_theta} out of range: k_theta * delta_theta must be < 2*pi (k_theta < {})",
                self.n_theta
            )));
        }
        let rho = k_rho as f64 * self.delta_rho;
        let theta = k_theta as f64 * self.delta_theta;
        Ok((rho * theta.cos(), rho * theta.sin()))
    }

    /// Probability mass of an offset that lies exactly on the discrete grid
    /// (within [`GRID_TOL`]). Offsets beyond `rho_max` have mass zero; offsets
    /// inside the support but off the grid are a domain error. Use
    /// [`PolarErrorModel::error_prior_nearest`] to snap instead.
    pub fn error_prior(&self, offset: (f64, f64)) -> Result<f64> {
        let rho = offset.0.hypot(offset.1);
        if rho > self.rho_max + GRID_TOL {
            return Ok(0.0);
        }
        let k = (rho / self.delta_rho).round();
        if (rho - k * self.delta_rho).abs() > GRID_TOL {
            return Err(Error::domain(format!(
                "offset distance {rho} is not a multiple of delta_rho {} within {GRID_TOL}",
                self.delta_rho
            )));
        }
        if k > 0.0 {
            let theta = offset.1.atan2(offset.0).rem_euclid(TAU);
            let j = (theta / self.delta_theta).round();
            let dev = (theta - j * self.delta_theta).abs().min(
                // atan2 puts angles near 2*pi at the wrap boundary
                (theta - (j - self.n_theta as f64) * self.delta_theta).abs(),
            );
            if dev > GRID_TOL {
                return Err(Error::domain(format!(
                    "offset angle {theta} is not a multiple of delta_theta {} within {GRID_TOL}",
                    self.delta_theta
                )));
            }
        }
        Ok(1.0 / self.cell_count() as f64)
    }

    /// Probability mass of the grid cell nearest to `offset` (zero outside
    /// the support once snapped).
    pub fn error_prior_nearest(&self, offset: (f64, f64)) -> f64 {
        let rho = offset.0.hypot(offset.1);
        let snapped = (rho / self.delta_rho).round() * self.delta_rho;
        if snapped > self.rho_max + GRID_TOL {
            0.0
        } else {
            1.0 / self.cell_count() as f64
        }
    }

    /// Joint prior of independently drawn per-point offsets (the product of
    /// per-point priors). Errors carry the index of the offending offset.
    pub fn multipoint_prior(&self, offsets: &[(f64, f64)]) -> Result<f64> {
        let mut product = 1.0;
        for (i, &offset) in offsets.iter().enumerate() {
            let p = self
                .error_prior(offset)
                .map_err(|e| Error::domain(format!("offset {i}: {e}")))?;
            product *= p;
        }
        Ok(product)
    }
}

/// A contiguous piece of a source polyline with bounded arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    /// Index of the source polyline.
    pub parent_id: usize,
    /// Position of this chunk within its source polyline.
    pub index: usize,
    vertices: Vec<Point>,
    arc_length: f64,
}

impl Chunk {
    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn arc_length(&self) -> f64 {
        self.arc_length
    }

    pub fn first(&self) -> Point {
        self.vertices[0]
    }

    pub fn last(&self) -> Point {
        *self.vertices.last().expect("chunk has vertices")
    }

    pub fn as_polyline(&self) -> Result<Polyline> {
        Polyline::new(self.vertices.clone())
    }

    /// Unit vector perpendicular to the chord from first to last vertex
    /// (chord rotated +90 degrees). Falls back to the longest constituent
    /// segment when the chord is degenerate.
    pub fn normal(&self) -> Result<(f64, f64)> {
        let chord = (self.last().x - self.first().x, self.last().y - self.first().y);
        let mut dir = chord;
        if dir.0.hypot(dir.1) <= 1e-12 {
            let longest = self
                .vertices
                .windows(2)
                .max_by(|a, b| {
                    a[0].dist(a[1])
                        .partial_cmp(&b[0].dist(b[1]))
                        .expect("finite lengths")
                })
                .expect("chunk has >= 2 vertices");
            dir = (longest[1].x - longest[0].x, longest[1].y - longest[0].y);
        }
        let norm = dir.0.hypot(dir.1);
        if norm <= 1e-12 {
            return Err(Error::domain(
                "degenerate chunk: all vertices coincide".to_string(),
            ));
        }
        Ok((-dir.1 / norm, dir.0 / norm))
    }
}

/// Splits `line` into chunks of arc length `chunk_len`, cutting segments at
/// interior points where needed. Every chunk except possibly the last has
/// exactly `chunk_len` of arc; adjacent chunks share their boundary vertex,
/// so concatenating the chunks reproduces the line geometrically.
pub fn chunk_polyline(line: &Polyline, chunk_len: f64) -> Result<Vec<Chunk>> {
    if !(chunk_len > 0.0) || !chunk_len.is_finite() {
        return Err(Error::domain(format!(
            "chunk_len must be > 0, got {chunk_len}"
        )));
    }
    const CUT_TOL: f64 = 1e-9;
    let mut chunks = Vec::new();
    let mut current = vec![line.vertices()[0]];
    let mut current_len = 0.0;
    let mut remaining = chunk_len;

    let close = |verts: &mut Vec<Point>, len: &mut f64, chunks: &mut Vec<Chunk>| {
        let vertices = std::mem::replace(verts, vec![*verts.last().expect("nonempty")]);
        chunks.push(Chunk {
            parent_id: 0,
            index: chunks.len(),
            vertices,
            arc_length: *len,
        });
        *len = 0.0;
    };

    for seg in line.vertices().windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let seg_len = a.dist(b);
        let mut consumed = 0.0;
        while seg_len - consumed > remaining + CUT_TOL {
            consumed += remaining;
            let t = consumed / seg_len;
            let cut = Point {
                x: a.x + t * (b.x - a.x),
                y: a.y + t * (b.y - a.y),
            };
            current.push(cut);
            current_len += remaining;
            close(&mut current, &mut current_len, &mut chunks);
            remaining = chunk_len;
        }
        let tail = seg_len - consumed;
        current.push(b);
        current_len += tail;
        remaining -= tail;
        if remaining <= CUT_TOL {
            close(&mut current, &mut current_len, &mut chunks);
            remaining = chunk_len;
        }
    }
    if current.len() >= 2 {
        let len = current_len;
        chunks.push(Chunk {
            parent_id: 0,
            index: chunks.len(),
            vertices: current,
            arc_length: len,
        });
    }
    Ok(chunks)
}

/// Chunks every line, labelling each chunk with its source line index and
/// numbering chunks globally in input order.
pub fn chunk_lines(lines: &[Polyline], chunk_len: f64) -> Result<Vec<Chunk>> {
    let mut all = Vec::new();
    for (line_id, line) in lines.iter().enumerate() {
        for mut chunk in chunk_polyline(line, chunk_len)? {
            chunk.parent_id = line_id;
            chunk.index = all.len();
            all.push(chunk);
        }
    }
    Ok(all)
}

/// Candidate true placements of one chunk: the chunk itself plus rigid
/// translations along its chord normal, with priors from the error model
/// renormalized over the set.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub chunk_id: usize,
    /// Candidate geometries ordered by signed offset.
    pub candidates: Vec<Polyline>,
    /// Signed perpendicular displacement of each candidate, in pixels.
    pub offsets: Vec<f64>,
    /// Per-candidate prior probability; sums to 1.
    pub priors: Vec<f64>,
}

/// Enumerates `2 * n_side + 1` candidates for `chunk`: translations by
/// `i * step` along the chord normal for `i` in `-n_side..=n_side`. The
/// zero-offset candidate is the input chunk itself.
pub fn generate_candidates(
    chunk: &Chunk,
    n_side: usize,
    step: f64,
    model: &PolarErrorModel,
) -> Result<CandidateSet> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::domain(format!("step must be > 0, got {step}")));
    }
    let reach = n_side as f64 * step;
    if reach > model.rho_max() + GRID_TOL {
        return Err(Error::domain(format!(
            "n_side * step = {reach} exceeds rho_max {}: candidates would fall outside the error support",
            model.rho_max()
        )));
    }
    let normal = chunk.normal()?;
    let base = chunk.as_polyline()?;
    let mut candidates = Vec::with_capacity(2 * n_side + 1);
    let mut offsets = Vec::with_capacity(2 * n_side + 1);
    let mut priors = Vec::with_capacity(2 * n_side + 1);
    for i in -(n_side as i64)..=(n_side as i64) {
        let offset = i as f64 * step;
        let candidate = if i == 0 {
            base.clone()
        } else {
            base.translate(offset * normal.0, offset * normal.1)
        };
        priors.push(model.error_prior_nearest((offset * normal.0, offset * normal.1)));
        offsets.push(offset);
        candidates.push(candidate);
    }
    let total: f64 = priors.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain(
            "all candidate priors are zero under the error model".to_string(),
        ));
    }
    for p in &mut priors {
        *p /= total;
    }
    Ok(CandidateSet {
        chunk_id: chunk.index,
        candidates,
        offsets,
        priors,
    })
}
