//! Stroke files, bounding boxes, the fixed-grid region stub, and
//! hand-crafted region descriptors standing in for pooled CNN features.
//!
//! Stroke file format: one stroke per line, points as `x,y` separated by
//! `;`, e.g. `0,0;2.5,3;4,1`. Blank lines and `#` comments are skipped.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            min_x: self.min_x.min(other.min_x),
            min_y: self.min_y.min(other.min_y),
            max_x: self.max_x.max(other.max_x),
            max_y: self.max_y.max(other.max_y),
        }
    }

    /// Area of the intersection, zero when disjoint or only touching.
    pub fn overlap(&self, other: &BBox) -> f64 {
        let w = self.max_x.min(other.max_x) - self.min_x.max(other.min_x);
        let h = self.max_y.min(other.max_y) - self.min_y.max(other.min_y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

pub type Point = (f64, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct StrokeFile {
    pub strokes: Vec<Vec<Point>>,
}

impl StrokeFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut strokes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.into(),
                line: i + 1,
                msg,
            };
            let mut points = Vec::new();
            for tok in line.split(';').map(str::trim).filter(|t| !t.is_empty()) {
                let (x, y) = tok
                    .split_once(',')
                    .ok_or_else(|| err(format!("point {tok:?} is not x,y")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(format!("bad coordinate {s:?}")))
                };
                points.push((parse(x)?, parse(y)?));
            }
            if points.len() < 2 {
                return Err(err(format!(
                    "a stroke needs at least 2 points, got {}",
                    points.len()
                )));
            }
            strokes.push(points);
        }
        Ok(StrokeFile { strokes })
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// One box per stroke, in stroke order.
pub fn stroke_bboxes(file: &StrokeFile) -> Vec<BBox> {
    file.strokes
        .iter()
        .map(|pts| {
            pts.iter().fold(
                BBox {
                    min_x: f64::INFINITY,
                    min_y: f64::INFINITY,
                    max_x: f64::NEG_INFINITY,
                    max_y: f64::NEG_INFINITY,
                },
                |b, &(x, y)| BBox {
                    min_x: b.min_x.min(x),
                    min_y: b.min_y.min(y),
                    max_x: b.max_x.max(x),
                    max_y: b.max_y.max(y),
                },
            )
        })
        .collect()
}

/// Tiles a `width x height` canvas into `k` equal boxes, row-major. The
/// grid has `r x c` tiles with `r` the largest divisor of `k` not above
/// `sqrt(k)`, so `k = 16` gives 4x4. Rejected when a tile would be narrower
/// than one canvas unit.
pub fn grid_regions(width: f64, height: f64, k: usize) -> Result<Vec<BBox>> {
    if k == 0 {
        return Err(Error::invalid("grid_regions", "k must be positive"));
    }
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::invalid("grid_regions", "canvas must have positive size"));
    }
    let rows = (1..=k).filter(|r| k % r == 0 && r * r <= k).max().unwrap_or(1);
    let cols = k / rows;
    if cols as f64 > width || rows as f64 > height {
        return Err(Error::invalid(
            "grid_regions",
            format!("{k} tiles ({rows}x{cols}) exceed a {width}x{height} canvas"),
        ));
    }
    let mut out = Vec::with_capacity(k);
    for r in 0..rows {
        for c in 0..cols {
            out.push(BBox {
                min_x: width * c as f64 / cols as f64,
                min_y: height * r as f64 / rows as f64,
                max_x: width * (c + 1) as f64 / cols as f64,
                max_y: height * (r + 1) as f64 / rows as f64,
            });
        }
    }
    Ok(out)
}

/// Number of leading geometric entries in [`stroke_features`] rows.
pub const GEOMETRY_FEATURES: usize = 6;

/// Per-stroke descriptors of width `d_raw`: box geometry relative to the
/// drawing's extent (center, size, log point count, path length over the
/// diagonal) followed by a normalized point-density histogram over a square
/// grid laid on the drawing. Unused trailing slots stay zero.
pub fn stroke_features(file: &StrokeFile, d_raw: usize) -> Result<Tensor> {
    if file.strokes.is_empty() {
        return Err(Error::EmptyRegionSet);
    }
    if d_raw <= GEOMETRY_FEATURES {
        return Err(Error::invalid(
            "stroke_features",
            format!("d_raw must exceed {GEOMETRY_FEATURES}, got {d_raw}"),
        ));
    }
    let boxes = stroke_bboxes(file);
    let canvas = boxes.iter().skip(1).fold(boxes[0], |a, b| a.union(b));
    let cw = canvas.width().max(1e-9);
    let ch = canvas.height().max(1e-9);
    let diag = (cw * cw + ch * ch).sqrt();
    let grid = ((d_raw - GEOMETRY_FEATURES) as f64).sqrt().floor() as usize;

    let mut rows = Vec::with_capacity(boxes.len());
    for (pts, b) in file.strokes.iter().zip(&boxes) {
        let mut f = vec![0.0; d_raw];
        f[0] = ((b.min_x + b.max_x) / 2.0 - canvas.min_x) / cw;
        f[1] = ((b.min_y + b.max_y) / 2.0 - canvas.min_y) / ch;
        f[2] = b.width() / cw;
        f[3] = b.height() / ch;
        f[4] = (pts.len() as f64).ln_1p();
        f[5] = pts
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .sum::<f64>()
            / diag;
        if grid > 0 {
            for &(x, y) in pts {
                let gx = ((((x - canvas.min_x) / cw) * grid as f64) as usize).min(grid - 1);
                let gy = ((((y - canvas.min_y) / ch) * grid as f64) as usize).min(grid - 1);
                f[GEOMETRY_FEATURES + gy * grid + gx] += 1.0 / pts.len() as f64;
            }
        }
        rows.push(f);
    }
    Ok(Tensor::from_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_stroke_box() {
        let f = StrokeFile::parse("0,0;2,3\n", "t").unwrap();
        assert_eq!(
            stroke_bboxes(&f),
            vec![BBox {
                min_x: 0.0,
                min_y: 0.0,
                max_x: 2.0,
                max_y: 3.0
            }]
        );
    }

    #[test]
    fn repeated_point_gives_degenerate_box() {
        let f = StrokeFile::parse("1,1;1,1;1,1\n", "t").unwrap();
        assert_eq!(stroke_bboxes(&f)[0].area(), 0.0);
    }

    #[test]
    fn boxes_keep_stroke_order() {
        let f = StrokeFile::parse("5,5;6,7\n# comment\n0,0;1,1\n\n2,0; 3,-1\n", "t").unwrap();
        let b = stroke_bboxes(&f);
        assert_eq!(b.len(), 3);
        assert_eq!(b[0].min_x, 5.0);
        assert_eq!(b[1].max_y, 1.0);
        assert_eq!(b[2].min_y, -1.0);
    }

    #[test]
    fn malformed_strokes_report_line() {
        let cases = ["0,0;1,1\n0,0\n", "0,0;1,1\n\n0,0;x,1\n", "0,0;1\n"];
        let lines = [2, 3, 1];
        for (text, line) in cases.iter().zip(lines) {
            match StrokeFile::parse(text, "s.txt") {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn grid_tiles_cover_canvas() {
        let tiles = grid_regions(100.0, 100.0, 16).unwrap();
        assert_eq!(tiles.len(), 16);
        for t in &tiles {
            assert_eq!((t.width(), t.height()), (25.0, 25.0));
        }
        let total: f64 = tiles.iter().map(BBox::area).sum();
        assert_eq!(total, 100.0 * 100.0);
        for i in 0..16 {
            for j in i + 1..16 {
                assert_eq!(tiles[i].overlap(&tiles[j]), 0.0);
            }
        }
        let one = grid_regions(100.0, 80.0, 1).unwrap();
        assert_eq!(one[0], BBox { min_x: 0.0, min_y: 0.0, max_x: 100.0, max_y: 80.0 });
        assert!(grid_regions(3.0, 3.0, 16).is_err());
        assert!(grid_regions(10.0, 10.0, 0).is_err());
        assert_eq!(grid_regions(60.0, 40.0, 6).unwrap().len(), 6);
    }

    #[test]
    fn descriptors_have_requested_width() {
        let f = StrokeFile::parse("0,0;10,0;10,10\n5,5;6,6\n", "t").unwrap();
        let t = stroke_features(&f, 22).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 22));
        assert!(t.is_finite());
        let hist: f64 = t.row_slice(0)[GEOMETRY_FEATURES..].iter().sum();
        assert!((hist - 1.0).abs() < 1e-12);
        assert!(stroke_features(&f, 6).is_err());
    }
}
