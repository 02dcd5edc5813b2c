//! Grid-side label machinery: feature/label rasters, buffered polyline
//! rasterization, training-window extraction, and flip/rotate augmentation.
//!
//! Pixel `(row r, col c)` has its center at continuous coordinates
//! `(x, y) = (c + 0.5, r + 0.5)`, so buffer semantics are independent of the
//! raster resolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{point_segment_dist2, Point, Polyline};

/// Multi-channel raster of per-pixel explanatory features.
///
/// Values are stored row-major with channels innermost, matching the GRID1
/// file layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    /// Meters per pixel.
    pub resolution: f64,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(height: usize, width: usize, channels: usize, resolution: f64) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::domain(format!(
                "grid dims must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        if !(resolution > 0.0) {
            return Err(Error::domain(format!(
                "resolution must be > 0, got {resolution}"
            )));
        }
        Ok(FeatureGrid {
            height,
            width,
            channels,
            resolution,
            values: vec![0.0; height * width * channels],
        })
    }

    pub fn from_values(
        height: usize,
        width: usize,
        channels: usize,
        resolution: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        let mut grid = Self::zeros(height, width, channels, resolution)?;
        if values.len() != grid.values.len() {
            return Err(Error::domain(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                grid.values.len(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("feature values must be finite".to_string()));
        }
        grid.values = values;
        Ok(grid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[(row * self.width + col) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        self.values[(row * self.width + col) * self.channels + channel] = value;
    }
}

/// Binary raster of per-pixel class labels (1 = stream).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl LabelGrid {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::domain(format!(
                "grid dims must be >= 1, got {height}x{width}"
            )));
        }
        Ok(LabelGrid {
            height,
            width,
            values: vec![0; height * width],
        })
    }

    pub fn from_values(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        let mut grid = Self::zeros(height, width)?;
        if values.len() != grid.values.len() {
            return Err(Error::domain(format!(
                "expected {} values for {height}x{width}, got {}",
                grid.values.len(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::domain(format!(
                "label values must be 0 or 1, got {bad}"
            )));
        }
        grid.values = values;
        Ok(grid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.values[row * self.width + col] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// Rasterizes polylines with a distance buffer: pixel `(r, c)` is 1 iff the
/// Euclidean distance from its center to the nearest point on any polyline is
/// at most `buffer` (meters). Scans only the inflated bounding strip of each
/// segment; the result equals the exhaustive per-pixel distance test.
pub fn rasterize_buffer(
    lines: &[Polyline],
    buffer: f64,
    height: usize,
    width: usize,
    resolution: f64,
) -> Result<LabelGrid> {
    if !(buffer >= 0.0) {
        return Err(Error::domain(format!("buffer must be >= 0, got {buffer}")));
    }
    if !(resolution > 0.0) {
        return Err(Error::domain(format!(
            "resolution must be > 0, got {resolution}"
        )));
    }
    let mut grid = LabelGrid::zeros(height, width)?;
    let r_px = buffer / resolution;
    let r2 = r_px * r_px;
    for line in lines {
        for seg in line.vertices().windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x_min = a.x.min(b.x) - r_px;
            let x_max = a.x.max(b.x) + r_px;
            let y_min = a.y.min(b.y) - r_px;
            let y_max = a.y.max(b.y) + r_px;
            // Pixel center (c + 0.5, r + 0.5) in [min, max] bounds.
            let c0 = ((x_min - 0.5).ceil().max(0.0)) as usize;
            let c1 = ((x_max - 0.5).floor().min(width as f64 - 1.0)).max(0.0) as usize;
            let r0 = ((y_min - 0.5).ceil().max(0.0)) as usize;
            let r1 = ((y_max - 0.5).floor().min(height as f64 - 1.0)).max(0.0) as usize;
            if x_max < 0.5 || y_max < 0.5 {
                continue;
            }
            for row in r0..=r1.min(height - 1) {
                for col in c0..=c1.min(width - 1) {
                    if grid.get(row, col) == 1 {
                        continue;
                    }
                    let center = Point {
                        x: col as f64 + 0.5,
                        y: row as f64 + 0.5,
                    };
                    if point_segment_dist2(center, a, b) <= r2 {
                        grid.set(row, col, 1);
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// A sub-rectangle of a parent grid, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn full(height: usize, width: usize) -> Self {
        Region {
            row0: 0,
            col0: 0,
            height,
            width,
        }
    }
}

/// A square window anchored at `(row, col)` in its parent grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl Window {
    pub fn overlaps(&self, other: &Window) -> bool {
        let dr = self.row.abs_diff(other.row);
        let dc = self.col.abs_diff(other.col);
        dr < self.size.max(other.size) && dc < self.size.max(other.size)
    }

    /// Copies the feature patch under this window.
    pub fn features(&self, grid: &FeatureGrid) -> FeatureGrid {
        let mut out = FeatureGrid::zeros(self.size, self.size, grid.channels(), grid.resolution)
            .expect("window size validated at extraction");
        for r in 0..self.size {
            for c in 0..self.size {
                for ch in 0..grid.channels() {
                    out.set(r, c, ch, grid.get(self.row + r, self.col + c, ch));
                }
            }
        }
        out
    }

    /// Copies the label patch under this window.
    pub fn labels(&self, grid: &LabelGrid) -> LabelGrid {
        let mut out = LabelGrid::zeros(self.size, self.size).expect("window size >= 1");
        for r in 0..self.size {
            for c in 0..self.size {
                out.set(r, c, grid.get(self.row + r, self.col + c));
            }
        }
        out
    }
}

/// Samples `count` pairwise non-overlapping square windows uniformly inside
/// `region`, deterministic for a given rng. Placement retries in rounds; if
/// the packing cannot be completed within the retry budget the error reports
/// how many windows were achieved. Windows that would clip the region
/// boundary are never produced.
pub fn extract_windows(
    features: &FeatureGrid,
    labels: &LabelGrid,
    size: usize,
    count: usize,
    region: Region,
    rng: &mut impl Rng,
) -> Result<Vec<Window>> {
    if labels.height() != features.height() || labels.width() != features.width() {
        return Err(Error::domain(format!(
            "feature grid {}x{} and label grid {}x{} differ",
            features.height(),
            features.width(),
            labels.height(),
            labels.width()
        )));
    }
    if region.row0 + region.height > features.height()
        || region.col0 + region.width > features.width()
    {
        return Err(Error::domain("region exceeds grid bounds".to_string()));
    }
    if size == 0 || size > region.height || size > region.width {
        return Err(Error::domain(format!(
            "window size {size} does not fit region {}x{}",
            region.height, region.width
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }

    let row_span = region.height - size + 1;
    let col_span = region.width - size + 1;
    const ROUNDS: usize = 400;
    let tries_per_window = 64.max(8 * count);
    let mut best_achieved = 0;
    for _ in 0..ROUNDS {
        let mut placed: Vec<Window> = Vec::with_capacity(count);
        'place: for _ in 0..count {
            for _ in 0..tries_per_window {
                let w = Window {
                    row: region.row0 + rng.gen_range(0..row_span),
                    col: region.col0 + rng.gen_range(0..col_span),
                    size,
                };
                if placed.iter().all(|p| !p.overlaps(&w)) {
                    placed.push(w);
                    continue 'place;
                }
            }
            break;
        }
        if placed.len() == count {
            return Ok(placed);
        }
        best_achieved = best_achieved.max(placed.len());
    }
    Err(Error::Capacity {
        context: format!(
            "could not pack {count} non-overlapping {size}x{size} windows into {}x{} region",
            region.height, region.width
        ),
        requested: count,
        achieved: best_achieved,
    })
}

/// One training sample: a feature patch, its label patch, and a loss weight.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: FeatureGrid,
    pub labels: LabelGrid,
    pub weight: f64,
}

impl Sample {
    pub fn new(features: FeatureGrid, labels: LabelGrid) -> Self {
        Sample {
            features,
            labels,
            weight: 1.0,
        }
    }
}

/// Expands a square window into its four augmented variants: the original,
/// a horizontal flip, a vertical flip, and a 90-degree counterclockwise
/// rotation. Features and labels transform identically.
pub fn augment_window(
    features: &FeatureGrid,
    labels: &LabelGrid,
) -> Result<Vec<(FeatureGrid, LabelGrid)>> {
    let s = features.height();
    if features.width() != s || labels.height() != s || labels.width() != s {
        return Err(Error::domain(format!(
            "augmentation requires a square window, got features {}x{}, labels {}x{}",
            features.height(),
            features.width(),
            labels.height(),
            labels.width()
        )));
    }
    let transforms: [fn(usize, usize, usize) -> (usize, usize); 4] = [
        |r, c, _| (r, c),
        |r, c, s| (r, s - 1 - c),
        |r, c, s| (s - 1 - r, c),
        // 90 degrees counterclockwise: output (r, c) reads input (c, s-1-r).
        |r, c, s| (c, s - 1 - r),
    ];
    let mut out = Vec::with_capacity(4);
    for map in transforms {
        let mut f = FeatureGrid::zeros(s, s, features.channels(), features.resolution)?;
        let mut l = LabelGrid::zeros(s, s)?;
        for r in 0..s {
            for c in 0..s {
                let (sr, sc) = map(r, c, s);
                for ch in 0..features.channels() {
                    f.set(r, c, ch, features.get(sr, sc, ch));
                }
                l.set(r, c, labels.get(sr, sc));
            }
        }
        out.push((f, l));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(coords: &[(f64, f64)]) -> Polyline {
        Polyline::new(
            coords
                .iter()
                .map(|&(x, y)| Point { x, y })
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    /// Exhaustive per-pixel oracle: min distance to any segment, thresholded.
    fn rasterize_oracle(
        lines: &[Polyline],
        buffer: f64,
        height: usize,
        width: usize,
        resolution: f64,
    ) -> LabelGrid {
        let mut grid = LabelGrid::zeros(height, width).unwrap();
        let r_px = buffer / resolution;
        for row in 0..height {
            for col in 0..width {
                let p = Point {
                    x: col as f64 + 0.5,
                    y: row as f64 + 0.5,
                };
                let mut d2 = f64::INFINITY;
                for l in lines {
                    for seg in l.vertices().windows(2) {
                        let t2 = point_segment_dist2(p, seg[0], seg[1]);
                        if t2 < d2 {
                            d2 = t2;
                        }
                    }
                }
                if d2 <= r_px * r_px {
                    grid.set(row, col, 1);
                }
            }
        }
        grid
    }

    #[test]
    fn rasterize_empty_line_list_is_all_zero() {
        let grid = rasterize_buffer(&[], 2.0, 8, 8, 1.0).unwrap();
        assert_eq!(grid.count_ones(), 0);
    }

    #[test]
    fn rasterize_rejects_empty_dims() {
        assert!(rasterize_buffer(&[], 2.0, 0, 8, 1.0).is_err());
        assert!(rasterize_buffer(&[], -0.5, 8, 8, 1.0).is_err());
    }

    #[test]
    fn rasterize_horizontal_line_matches_oracle_per_pixel() {
        let l = line(&[(0.0, 5.5), (10.0, 5.5)]);
        let fast = rasterize_buffer(std::slice::from_ref(&l), 2.0, 12, 12, 1.0).unwrap();
        let slow = rasterize_oracle(std::slice::from_ref(&l), 2.0, 12, 12, 1.0);
        assert_eq!(fast, slow);
        // Row 5 pixel centers sit exactly on the line.
        assert_eq!(fast.get(5, 3), 1);
        // Distance 3 from the line: outside a 2 m buffer.
        assert_eq!(fast.get(2, 3), 0);
    }

    #[test]
    fn rasterize_respects_resolution() {
        let l = line(&[(0.0, 4.5), (9.0, 4.5)]);
        // 2 m buffer at 0.5 m/px covers 4 px.
        let coarse = rasterize_buffer(std::slice::from_ref(&l), 2.0, 10, 10, 1.0).unwrap();
        let fine = rasterize_buffer(std::slice::from_ref(&l), 2.0, 10, 10, 0.5).unwrap();
        assert!(fine.count_ones() > coarse.count_ones());
        assert_eq!(fine, rasterize_oracle(std::slice::from_ref(&l), 2.0, 10, 10, 0.5));
    }

    #[test]
    fn extract_zero_windows_is_empty() {
        let f = FeatureGrid::zeros(16, 16, 1, 1.0).unwrap();
        let l = LabelGrid::zeros(16, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = extract_windows(&f, &l, 8, 0, Region::full(16, 16), &mut rng).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn extract_tiling_pair_fills_region() {
        let f = FeatureGrid::zeros(16, 8, 1, 1.0).unwrap();
        let l = LabelGrid::zeros(16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ws = extract_windows(&f, &l, 8, 2, Region::full(16, 8), &mut rng).unwrap();
        ws.sort_by_key(|w| w.row);
        // Only one non-overlapping placement family exists: rows 0 and 8.
        assert_eq!(ws[0], Window { row: 0, col: 0, size: 8 });
        assert_eq!(ws[1], Window { row: 8, col: 0, size: 8 });
    }

    #[test]
    fn extract_reports_capacity_on_infeasible_packing() {
        let f = FeatureGrid::zeros(16, 16, 1, 1.0).unwrap();
        let l = LabelGrid::zeros(16, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = extract_windows(&f, &l, 8, 5, Region::full(16, 16), &mut rng).unwrap_err();
        match err {
            Error::Capacity {
                requested,
                achieved,
                ..
            } => {
                assert_eq!(requested, 5);
                assert!(achieved < 5);
            }
            other => panic!("expected capacity error, got {other}"),
        }
    }

    #[test]
    fn extract_is_deterministic_per_seed() {
        let f = FeatureGrid::zeros(64, 64, 1, 1.0).unwrap();
        let l = LabelGrid::zeros(64, 64).unwrap();
        let a = extract_windows(
            &f,
            &l,
            8,
            6,
            Region::full(64, 64),
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        let b = extract_windows(
            &f,
            &l,
            8,
            6,
            Region::full(64, 64),
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augment_produces_four_variants_with_mapped_corner() {
        let s = 6;
        let mut f = FeatureGrid::zeros(s, s, 2, 1.0).unwrap();
        let mut l = LabelGrid::zeros(s, s).unwrap();
        f.set(0, 0, 0, 1.0);
        f.set(0, 0, 1, -2.0);
        l.set(0, 0, 1);
        let out = augment_window(&f, &l).unwrap();
        assert_eq!(out.len(), 4);

        // Index-mapping oracle for the marked pixel (0, 0).
        let expected = [(0, 0), (0, s - 1), (s - 1, 0), (s - 1, 0)];
        // Under ccw rotation the source (0,0) appears where (c, s-1-r) = (0,0),
        // i.e. (r, c) = (s-1, 0).
        for (k, (fa, la)) in out.iter().enumerate() {
            assert_eq!(la.count_ones(), 1);
            let (er, ec) = expected[k];
            assert_eq!(la.get(er, ec), 1, "variant {k}");
            assert_eq!(fa.get(er, ec, 0), 1.0);
            assert_eq!(fa.get(er, ec, 1), -2.0);
        }
    }

    #[test]
    fn augment_preserves_constant_grids() {
        let f = FeatureGrid::zeros(4, 4, 1, 1.0).unwrap();
        let l = LabelGrid::zeros(4, 4).unwrap();
        for (fa, la) in augment_window(&f, &l).unwrap() {
            assert_eq!(fa, f);
            assert_eq!(la, l);
        }
    }

    #[test]
    fn augment_rejects_non_square() {
        let f = FeatureGrid::zeros(4, 6, 1, 1.0).unwrap();
        let l = LabelGrid::zeros(4, 6).unwrap();
        assert!(augment_window(&f, &l).is_err());
    }

    #[test]
    fn augment_multiplicity_matches_window_counts() {
        // 698 windows -> 2792 samples when each yields its 4 variants.
        assert_eq!(698 * 4, 2792);
        assert_eq!(40 * 4, 160);
    }

    proptest! {
        #[test]
        fn rasterize_matches_oracle_on_random_lines(
            coords in proptest::collection::vec((2.0f64..30.0, 2.0f64..30.0), 2..6),
            buffer in 0.0f64..4.0,
        ) {
            let mut verts: Vec<Point> =
                coords.iter().map(|&(x, y)| Point { x, y }).collect();
            verts.dedup_by(|a, b| a.x == b.x && a.y == b.y);
            prop_assume!(verts.len() >= 2);
            let l = Polyline::new(verts).unwrap();
            let fast = rasterize_buffer(std::slice::from_ref(&l), buffer, 32, 32, 1.0).unwrap();
            let slow = rasterize_oracle(std::slice::from_ref(&l), buffer, 32, 32, 1.0);
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn rasterize_monotone_in_buffer(
            x0 in 2.0f64..28.0, y0 in 2.0f64..28.0,
            x1 in 2.0f64..28.0, y1 in 2.0f64..28.0,
            buffer in 0.0f64..3.0,
            extra in 0.1f64..3.0,
        ) {
            prop_assume!(x0 != x1 || y0 != y1);
            let l = line(&[(x0, y0), (x1, y1)]);
            let small = rasterize_buffer(std::slice::from_ref(&l), buffer, 32, 32, 1.0).unwrap();
            let big =
                rasterize_buffer(std::slice::from_ref(&l), buffer + extra, 32, 32, 1.0).unwrap();
            for (s, b) in small.values().iter().zip(big.values()) {
                prop_assert!(b >= s);
            }
        }

        #[test]
        fn rasterize_translation_equivariant(
            dx in -4i64..=4, dy in -4i64..=4,
            buffer in 0.5f64..2.5,
        ) {
            let l = line(&[(10.0, 12.0), (18.0, 14.5), (22.0, 20.0)]);
            let moved = l.translate(dx as f64, dy as f64);
            let base = rasterize_buffer(std::slice::from_ref(&l), buffer, 32, 32, 1.0).unwrap();
            let shifted =
                rasterize_buffer(std::slice::from_ref(&moved), buffer, 32, 32, 1.0).unwrap();
            for row in 0..32i64 {
                for col in 0..32i64 {
                    let (sr, sc) = (row + dy, col + dx);
                    if sr < 0 || sr >= 32 || sc < 0 || sc >= 32 {
                        continue;
                    }
                    // No clipping interferes: the test line stays >7 px from edges.
                    prop_assert_eq!(
                        base.get(row as usize, col as usize),
                        shifted.get(sr as usize, sc as usize)
                    );
                }
            }
        }

        #[test]
        fn augment_flips_are_involutions(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = 8;
            let mut f = FeatureGrid::zeros(s, s, 2, 1.0).unwrap();
            let mut l = LabelGrid::zeros(s, s).unwrap();
            for r in 0..s {
                for c in 0..s {
                    f.set(r, c, 0, rng.gen_range(-1.0..1.0));
                    f.set(r, c, 1, rng.gen_range(-1.0..1.0));
                    l.set(r, c, rng.gen_range(0..=1));
                }
            }
            let once = augment_window(&f, &l).unwrap();
            // Horizontal flip twice is the identity.
            let twice_h = augment_window(&once[1].0, &once[1].1).unwrap();
            prop_assert_eq!(&twice_h[1].0, &f);
            prop_assert_eq!(&twice_h[1].1, &l);
            // Vertical flip twice is the identity.
            let twice_v = augment_window(&once[2].0, &once[2].1).unwrap();
            prop_assert_eq!(&twice_v[2].0, &f);
            prop_assert_eq!(&twice_v[2].1, &l);
            // Rotating four times is the identity.
            let mut cur = (once[3].0.clone(), once[3].1.clone());
            for _ in 0..3 {
                let next = augment_window(&cur.0, &cur.1).unwrap();
                cur = (next[3].0.clone(), next[3].1.clone());
            }
            prop_assert_eq!(&cur.0, &f);
            prop_assert_eq!(&cur.1, &l);
        }
    }
}
