//! File formats: GRID1 rasters, polyline JSON, SEGM1 model checkpoints, PGM
//! previews, and CSV exports.
//!
//! GRID1 is an ASCII header `GRID1 <height> <width> <channels>` followed by a
//! newline and `height*width*channels` 32-bit little-endian IEEE-754 floats
//! in row-major, channel-last order. Label grids are stored as a one-channel
//! GRID1 holding 0.0/1.0. SEGM1 checkpoints are an ASCII header
//! `SEGM1 <layer-spec-string> <seed>` followed by the model's value arena as
//! 32-bit little-endian floats in declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Polyline};
use crate::model::{ModelSpec, ProbMap, SegModel};
use crate::raster::{FeatureGrid, LabelGrid};

fn read_header_line(reader: &mut impl Read, path: &Path) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader
            .read(&mut byte)
            .map_err(|e| Error::io(path.to_path_buf(), e))?;
        if n == 0 {
            return Err(Error::format(path, "unexpected end of file in header"));
        }
        if byte[0] == b'\n' {
            break;
        }
        if line.len() > 256 {
            return Err(Error::format(path, "header line too long"));
        }
        line.push(byte[0]);
    }
    String::from_utf8(line).map_err(|_| Error::format(path, "header is not valid UTF-8"))
}

fn read_f32_values(reader: &mut impl Read, count: usize, path: &Path) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 4];
    reader
        .read_exact(&mut bytes)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut trailing = [0u8; 1];
    if reader
        .read(&mut trailing)
        .map_err(|e| Error::io(path.to_path_buf(), e))?
        != 0
    {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_f32_values(
    writer: &mut impl Write,
    values: impl Iterator<Item = f64>,
    path: &Path,
) -> Result<()> {
    for v in values {
        writer
            .write_all(&(v as f32).to_le_bytes())
            .map_err(|e| Error::io(path.to_path_buf(), e))?;
    }
    Ok(())
}

/// Writes a feature grid in GRID1 format.
pub fn write_grid(grid: &FeatureGrid, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "GRID1 {} {} {}",
        grid.height(),
        grid.width(),
        grid.channels()
    )
    .map_err(|e| Error::io(path.to_path_buf(), e))?;
    write_f32_values(&mut w, grid.values().iter().copied(), path)?;
    w.flush().map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Reads a GRID1 feature grid. The resolution is not part of the format;
/// callers supply it (1 m/px by convention).
pub fn read_grid(path: &Path, resolution: f64) -> Result<FeatureGrid> {
    let file = File::open(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut r = BufReader::new(file);
    let header = read_header_line(&mut r, path)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "GRID1" {
        return Err(Error::format(path, format!("bad GRID1 header {header:?}")));
    }
    let dims: Vec<usize> = parts[1..]
        .iter()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad dimension {p:?}")))
        })
        .collect::<Result<_>>()?;
    let (h, wd, c) = (dims[0], dims[1], dims[2]);
    let values = read_f32_values(&mut r, h * wd * c, path)?;
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::format(path, "grid contains non-finite values"));
    }
    FeatureGrid::from_values(h, wd, c, resolution, values)
}

/// Writes a label grid as a one-channel GRID1 of 0.0/1.0.
pub fn write_labels(labels: &LabelGrid, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "GRID1 {} {} 1", labels.height(), labels.width())
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    write_f32_values(&mut w, labels.values().iter().map(|&v| v as f64), path)?;
    w.flush().map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Reads a one-channel GRID1 whose values are exactly 0.0 or 1.0.
pub fn read_labels(path: &Path) -> Result<LabelGrid> {
    let grid = read_grid(path, 1.0)?;
    if grid.channels() != 1 {
        return Err(Error::format(
            path,
            format!("label grid must have 1 channel, got {}", grid.channels()),
        ));
    }
    let values = grid
        .values()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(0u8)
            } else if v == 1.0 {
                Ok(1u8)
            } else {
                Err(Error::format(
                    path,
                    format!("label value {v} is not 0.0/1.0"),
                ))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelGrid::from_values(grid.height(), grid.width(), values)
}

#[derive(Debug, Serialize, Deserialize)]
struct PolylineFile {
    lines: Vec<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolution_m_per_px: Option<f64>,
}

/// Writes polylines as JSON: `{"lines": [[[x, y], ...], ...],
/// "resolution_m_per_px": 1.0}` with coordinates in pixel units.
pub fn write_polylines(lines: &[Polyline], resolution: f64, path: &Path) -> Result<()> {
    let doc = PolylineFile {
        lines: lines
            .iter()
            .map(|l| l.vertices().iter().map(|p| [p.x, p.y]).collect())
            .collect(),
        resolution_m_per_px: Some(resolution),
    };
    let file = File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &doc)
        .map_err(|e| Error::format(path, format!("json serialization failed: {e}")))?;
    w.write_all(b"\n")
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    w.flush().map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Reads polylines from JSON, returning the lines and the resolution
/// (defaulting to 1 m/px when the field is absent).
pub fn read_polylines(path: &Path) -> Result<(Vec<Polyline>, f64)> {
    let file = File::open(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let doc: PolylineFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(path, format!("json parse failed: {e}")))?;
    let lines = doc
        .lines
        .iter()
        .enumerate()
        .map(|(i, coords)| {
            let points = coords
                .iter()
                .map(|&[x, y]| Point::new(x, y))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::format(path, format!("line {i}: {e}")))?;
            Polyline::new(points).map_err(|e| Error::format(path, format!("line {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((lines, doc.resolution_m_per_px.unwrap_or(1.0)))
}

/// Writes a model checkpoint: `SEGM1 <layer-spec-string> <seed>` header, then
/// the full value arena as f32 little-endian in declaration order.
pub fn write_checkpoint(model: &SegModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "SEGM1 {} {}", model.spec().spec_string(), model.seed())
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    write_f32_values(&mut w, model.values().iter().copied(), path)?;
    w.flush().map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Reads a SEGM1 checkpoint back into a model.
pub fn read_checkpoint(path: &Path) -> Result<SegModel> {
    let file = File::open(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut r = BufReader::new(file);
    let header = read_header_line(&mut r, path)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "SEGM1" {
        return Err(Error::format(path, format!("bad SEGM1 header {header:?}")));
    }
    let spec =
        ModelSpec::parse_spec_string(parts[1]).map_err(|e| Error::format(path, e.to_string()))?;
    let seed: u64 = parts[2]
        .parse()
        .map_err(|_| Error::format(path, format!("bad seed {:?}", parts[2])))?;
    let probe = SegModel::init(spec.clone(), 0);
    let values = read_f32_values(&mut r, probe.values().len(), path)?;
    SegModel::from_values(spec, seed, values)
}

/// Writes one channel of a feature grid as a binary PGM (P5), min-max
/// normalized to 0..255.
pub fn write_pgm_channel(grid: &FeatureGrid, channel: usize, path: &Path) -> Result<()> {
    if channel >= grid.channels() {
        return Err(Error::domain(format!(
            "channel {channel} out of range ({} channels)",
            grid.channels()
        )));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            let v = grid.get(r, c, channel);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = (0..grid.height()).flat_map(|r| {
        (0..grid.width())
            .map(move |c| (((grid.get(r, c, channel) - lo) / span) * 255.0).round() as u8)
    });
    write_pgm_bytes(grid.height(), grid.width(), pixels, path)
}

/// Writes a probability map as a PGM with p=1 white.
pub fn write_pgm_probmap(map: &ProbMap, path: &Path) -> Result<()> {
    let pixels = map.values().iter().map(|&p| (p * 255.0).round() as u8);
    write_pgm_bytes(map.height(), map.width(), pixels, path)
}

/// Overlay preview: truth at gray 85, noisy at 170, inferred at 255 (later
/// layers overwrite earlier ones), background black.
pub fn write_overlay_pgm(
    truth: &LabelGrid,
    noisy: &LabelGrid,
    inferred: Option<&LabelGrid>,
    path: &Path,
) -> Result<()> {
    if truth.height() != noisy.height() || truth.width() != noisy.width() {
        return Err(Error::domain("overlay grids must share dims".to_string()));
    }
    if let Some(inf) = inferred {
        if inf.height() != truth.height() || inf.width() != truth.width() {
            return Err(Error::domain("overlay grids must share dims".to_string()));
        }
    }
    let n = truth.height() * truth.width();
    let pixels = (0..n).map(|i| {
        let mut v = 0u8;
        if truth.values()[i] == 1 {
            v = 85;
        }
        if noisy.values()[i] == 1 {
            v = 170;
        }
        if let Some(inf) = inferred {
            if inf.values()[i] == 1 {
                v = 255;
            }
        }
        v
    });
    write_pgm_bytes(truth.height(), truth.width(), pixels, path)
}

fn write_pgm_bytes(
    height: usize,
    width: usize,
    pixels: impl Iterator<Item = u8>,
    path: &Path,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path.to_path_buf(), e))?;
    let bytes: Vec<u8> = pixels.collect();
    debug_assert_eq!(bytes.len(), height * width);
    w.write_all(&bytes)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    w.flush().map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Writes a training curve as CSV: epoch, train_loss, val_loss, lr.
pub fn write_train_curve_csv(curve: &crate::model::TrainCurve, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "epoch,train_loss,val_loss,lr").map_err(|e| Error::io(path.to_path_buf(), e))?;
    for e in &curve.epochs {
        writeln!(w, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.lr)
            .map_err(|err| Error::io(path.to_path_buf(), err))?;
    }
    w.flush().map_err(|e| Error::io(path.to_path_buf(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn grid_round_trips_through_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.grid1");
        let mut grid = FeatureGrid::zeros(3, 4, 2, 1.0).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                grid.set(r, c, 0, (r * 4 + c) as f64 * 0.25);
                grid.set(r, c, 1, -((r + c) as f64));
            }
        }
        write_grid(&grid, &path).unwrap();
        let back = read_grid(&path, 1.0).unwrap();
        assert_eq!(back, grid);

        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"GRID1 3 4 2\n"));
        assert_eq!(bytes.len(), 12 + 3 * 4 * 2 * 4);
    }

    #[test]
    fn labels_round_trip_and_reject_non_binary() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l.grid1");
        let labels = LabelGrid::from_values(2, 3, vec![0, 1, 1, 0, 0, 1]).unwrap();
        write_labels(&labels, &path).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);

        let mut grid = FeatureGrid::zeros(2, 3, 1, 1.0).unwrap();
        grid.set(0, 0, 0, 0.5);
        write_grid(&grid, &path).unwrap();
        assert!(read_labels(&path).is_err());
    }

    #[test]
    fn truncated_grid_is_an_error_naming_the_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.grid1");
        std::fs::write(&path, b"GRID1 2 2 1\n\x00\x00\x00").unwrap();
        let err = read_grid(&path, 1.0).unwrap_err();
        assert!(err.to_string().contains("t.grid1"), "{err}");
    }

    #[test]
    fn polylines_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("lines.json");
        let lines = vec![
            Polyline::new(vec![
                Point::new(0.0, 1.0).unwrap(),
                Point::new(2.5, 3.25).unwrap(),
            ])
            .unwrap(),
            Polyline::new(vec![
                Point::new(10.0, 10.0).unwrap(),
                Point::new(11.0, 12.0).unwrap(),
                Point::new(14.0, 12.5).unwrap(),
            ])
            .unwrap(),
        ];
        write_polylines(&lines, 1.0, &path).unwrap();
        let (back, res) = read_polylines(&path).unwrap();
        assert_eq!(back, lines);
        assert_eq!(res, 1.0);
    }

    #[test]
    fn polylines_default_resolution_when_absent() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("lines.json");
        std::fs::write(&path, r#"{"lines": [[[0, 0], [1, 1]]]}"#).unwrap();
        let (lines, res) = read_polylines(&path).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(res, 1.0);
    }

    #[test]
    fn checkpoint_round_trips_at_f32_precision() {
        use crate::model::ModelSpec;
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.segm1");
        let model = SegModel::init(ModelSpec::compact(3), 77);
        write_checkpoint(&model, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.spec(), model.spec());
        assert_eq!(back.seed(), 77);
        assert_eq!(back.values().len(), model.values().len());
        for (a, b) in back.values().iter().zip(model.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn pgm_has_correct_header_and_size() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.pgm");
        let map = ProbMap::constant(4, 6, 0.5).unwrap();
        write_pgm_probmap(&map, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n6 4\n255\n"));
        assert_eq!(bytes.len(), b"P5\n6 4\n255\n".len() + 24);
    }

    #[test]
    fn overlay_layers_take_priority_in_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("o.pgm");
        let truth = LabelGrid::from_values(1, 3, vec![1, 1, 0]).unwrap();
        let noisy = LabelGrid::from_values(1, 3, vec![0, 1, 0]).unwrap();
        write_overlay_pgm(&truth, &noisy, None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let px = &bytes[bytes.len() - 3..];
        assert_eq!(px, &[85, 170, 0]);
    }
}
