//! Point datasets, bounding boxes, the uniform grid overlay and per-cell
//! histograms.
//!
//! Cell `(i, j)` is row `i`, column `j`. Rows are counted from `min_y`,
//! columns from `min_x`; both use `floor((coord - min) / cell_size)` clamped
//! to `g - 1`, so points on the max edges land in the last row/column.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

/// Default cells per side of the grid overlay.
pub const DEFAULT_GRID: usize = 30;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: point ({x}, {y}) lies outside the bounding box")]
    OutsideBBox { line: usize, x: f64, y: f64 },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid bounding box: {0}")]
    InvalidBBox(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("point #{index} ({x}, {y}) lies outside the grid")]
    OutsideGrid { index: usize, x: f64, y: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Axis-aligned box with strictly positive width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self, DataError> {
        let b = BBox {
            min_x,
            min_y,
            max_x,
            max_y,
        };
        if ![min_x, min_y, max_x, max_y].iter().all(|v| v.is_finite()) {
            return Err(DataError::InvalidBBox(format!("non-finite coordinate in {b}")));
        }
        if !(min_x < max_x && min_y < max_y) {
            return Err(DataError::InvalidBBox(format!("empty extent {b}")));
        }
        Ok(b)
    }

    pub fn unit() -> Self {
        BBox {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 1.0,
            max_y: 1.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.min_x, self.min_y, self.max_x, self.max_y]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.min_x, self.min_y, self.max_x, self.max_y
        )
    }
}

/// A `g x g` grid laid over a bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bbox: BBox,
    pub g: usize,
}

impl GridSpec {
    pub fn new(bbox: BBox, g: usize) -> Result<Self, DataError> {
        if g < 2 {
            return Err(DataError::InvalidGrid(format!("need at least 2 cells per side, got {g}")));
        }
        let spec = GridSpec { bbox, g };
        if !(spec.cell_width() > 0.0 && spec.cell_height() > 0.0) {
            return Err(DataError::InvalidGrid("zero-size cells".into()));
        }
        Ok(spec)
    }

    pub fn cell_width(&self) -> f64 {
        self.bbox.width() / self.g as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.bbox.height() / self.g as f64
    }

    /// Map x coordinate of vertical grid line `j` (0..=g).
    pub fn col_line_x(&self, j: usize) -> f64 {
        if j == self.g {
            self.bbox.max_x
        } else {
            self.bbox.min_x + j as f64 * self.cell_width()
        }
    }

    /// Map y coordinate of horizontal grid line `i` (0..=g).
    pub fn row_line_y(&self, i: usize) -> f64 {
        if i == self.g {
            self.bbox.max_y
        } else {
            self.bbox.min_y + i as f64 * self.cell_height()
        }
    }

    /// `(row, col)` of the cell holding `p`, or `None` when `p` is outside the box.
    pub fn cell_of(&self, p: &Point) -> Option<(usize, usize)> {
        if !p.is_finite() || !self.bbox.contains(p) {
            return None;
        }
        let col = axis_index(p.x, self.bbox.min_x, self.cell_width(), self.g);
        let row = axis_index(p.y, self.bbox.min_y, self.cell_height(), self.g);
        Some((row, col))
    }
}

fn axis_index(v: f64, min: f64, size: f64, g: usize) -> usize {
    let k = ((v - min) / size).floor();
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(g - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<Point>,
}

impl Dataset {
    pub fn new(points: Vec<Point>) -> Result<Self, DataError> {
        if points.is_empty() {
            return Err(DataError::Empty);
        }
        if let Some((index, p)) = points.iter().enumerate().find(|(_, p)| !p.is_finite()) {
            return Err(DataError::Parse {
                line: index + 1,
                msg: format!("non-finite coordinate ({}, {})", p.x, p.y),
            });
        }
        Ok(Dataset { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Tight box around the points, padded by a relative margin of 1e-9 so
    /// the extreme points sit strictly inside and degenerate axes get width.
    pub fn bbox(&self) -> BBox {
        let mut b = BBox {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for p in &self.points {
            b.min_x = b.min_x.min(p.x);
            b.min_y = b.min_y.min(p.y);
            b.max_x = b.max_x.max(p.x);
            b.max_y = b.max_y.max(p.y);
        }
        let pad = |lo: f64, hi: f64| {
            let scale = (hi - lo).max(lo.abs()).max(hi.abs()).max(1.0);
            1e-9 * scale
        };
        let px = pad(b.min_x, b.max_x);
        let py = pad(b.min_y, b.max_y);
        BBox {
            min_x: b.min_x - px,
            min_y: b.min_y - py,
            max_x: b.max_x + px,
            max_y: b.max_y + py,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 24);
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.x, p.y));
        }
        out
    }
}

/// Reads `x,y` lines. Blank lines and lines starting with `#` are skipped.
/// With `bounds`, any point outside the box is an error naming its line.
pub fn load_points_csv(path: impl AsRef<Path>, bounds: Option<&BBox>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_points_csv(&text, bounds)
}

pub fn parse_points_csv(text: &str, bounds: Option<&BBox>) -> Result<Dataset, DataError> {
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(xs), Some(ys), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("expected \"x,y\", got {line:?}"),
            });
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    line: line_no,
                    msg: format!("invalid coordinate {s:?}"),
                })
        };
        let p = Point::new(parse(xs)?, parse(ys)?);
        if let Some(b) = bounds {
            if !b.contains(&p) {
                return Err(DataError::OutsideBBox {
                    line: line_no,
                    x: p.x,
                    y: p.y,
                });
            }
        }
        points.push(p);
    }
    Dataset::new(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Uniform,
    GaussianMixture,
}

/// One isotropic Gaussian component, in unit-square coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub center: (f64, f64),
    pub std: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    /// Box the unit square is scaled onto.
    pub bbox: BBox,
    pub components: Vec<MixtureComponent>,
}

impl Default for MixtureParams {
    fn default() -> Self {
        MixtureParams {
            bbox: BBox::unit(),
            components: Vec::new(),
        }
    }
}

impl MixtureParams {
    /// `clusters` components with seeded centers in `[0.1, 0.9]^2`, spreads
    /// in `[0.02, 0.08]` and uneven weights.
    pub fn random(bbox: BBox, clusters: usize, seed: u64) -> Result<Self, DataError> {
        if clusters == 0 {
            return Err(DataError::InvalidMixture("no components".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<(f64, f64, f64, f64)> = (0..clusters)
            .map(|_| {
                (
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.02..0.08),
                    rng.gen_range(0.5..1.5),
                )
            })
            .collect();
        let total: f64 = raw.iter().map(|r| r.3).sum();
        let components = raw
            .into_iter()
            .map(|(x, y, std, w)| MixtureComponent {
                center: (x, y),
                std,
                weight: w / total,
            })
            .collect();
        Ok(MixtureParams { bbox, components })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.components.is_empty() {
            return Err(DataError::InvalidMixture("no components".into()));
        }
        let mut sum = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if !(c.std > 0.0 && c.std.is_finite()) {
                return Err(DataError::InvalidMixture(format!(
                    "component {k} has non-positive std {}",
                    c.std
                )));
            }
            if !(c.weight >= 0.0) {
                return Err(DataError::InvalidMixture(format!(
                    "component {k} has negative weight {}",
                    c.weight
                )));
            }
            sum += c.weight;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidMixture(format!("weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Seeded synthetic points. Gaussian samples falling outside the unit square
/// are redrawn, so every point ends up inside `params.bbox`.
pub fn gen_synthetic(
    kind: SyntheticKind,
    n: usize,
    seed: u64,
    params: &MixtureParams,
) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::Empty);
    }
    let b = params.bbox;
    BBox::new(b.min_x, b.min_y, b.max_x, b.max_y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = |u: f64, v: f64| Point::new(b.min_x + u * b.width(), b.min_y + v * b.height());
    let points = match kind {
        SyntheticKind::Uniform => (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                let v: f64 = rng.gen();
                scale(u, v)
            })
            .collect(),
        SyntheticKind::GaussianMixture => {
            params.validate()?;
            let picker = WeightedIndex::new(params.components.iter().map(|c| c.weight))
                .map_err(|e| DataError::InvalidMixture(e.to_string()))?;
            let unit = Normal::new(0.0, 1.0).expect("unit normal");
            let mut pts = Vec::with_capacity(n);
            while pts.len() < n {
                let c = &params.components[picker.sample(&mut rng)];
                loop {
                    let u = c.center.0 + c.std * unit.sample(&mut rng);
                    let v = c.center.1 + c.std * unit.sample(&mut rng);
                    if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) {
                        pts.push(scale(u, v));
                        break;
                    }
                }
            }
            pts
        }
    };
    Dataset::new(points)
}

/// Per-cell point counts, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellHistogram {
    g: usize,
    counts: Vec<u64>,
    total: u64,
}

impl CellHistogram {
    pub fn from_counts(g: usize, counts: Vec<u64>) -> Result<Self, DataError> {
        if counts.len() != g * g {
            return Err(DataError::InvalidGrid(format!(
                "expected {} counts for g={g}, got {}",
                g * g,
                counts.len()
            )));
        }
        let total = counts.iter().sum();
        Ok(CellHistogram { g, counts, total })
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn count(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.g + col]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

pub fn build_histogram(d: &Dataset, grid: &GridSpec) -> Result<CellHistogram, DataError> {
    let g = grid.g;
    let mut counts = vec![0u64; g * g];
    for (index, p) in d.points().iter().enumerate() {
        let (row, col) = grid.cell_of(p).ok_or(DataError::OutsideGrid {
            index,
            x: p.x,
            y: p.y,
        })?;
        counts[row * g + col] += 1;
    }
    CellHistogram::from_counts(g, counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2() -> GridSpec {
        GridSpec::new(BBox::unit(), 2).unwrap()
    }

    #[test]
    fn parses_simple_csv() {
        let d = parse_points_csv("0,0\n1,1", None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.points()[1], Point::new(1.0, 1.0));
    }

    #[test]
    fn header_and_crlf() {
        let d = parse_points_csv("# x,y\r\n0.5,0.25\r\n\r\n1e-3,2\r\n", None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.points()[1], Point::new(0.001, 2.0));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match parse_points_csv("a,b", None) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_points_csv("0,0\n1,2,3\n", None) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_points_csv("nan,1", None), Err(DataError::Parse { .. })));
    }

    #[test]
    fn empty_and_out_of_bounds() {
        assert!(matches!(parse_points_csv("# only\n\n", None), Err(DataError::Empty)));
        let b = BBox::unit();
        match parse_points_csv("0.5,0.5\n2,0.5\n", Some(&b)) {
            Err(DataError::OutsideBBox { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_points_csv("/nonexistent/points.csv", None),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let p = MixtureParams::default();
        let a = gen_synthetic(SyntheticKind::Uniform, 4, 1, &p).unwrap();
        let b = gen_synthetic(SyntheticKind::Uniform, 4, 1, &p).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(SyntheticKind::Uniform, 4, 2, &p).unwrap();
        assert_ne!(a, c);
        assert!(matches!(gen_synthetic(SyntheticKind::Uniform, 0, 1, &p), Err(DataError::Empty)));
    }

    #[test]
    fn mixture_respects_weights() {
        let centers = [(0.25, 0.25), (0.75, 0.75)];
        let params = MixtureParams {
            bbox: BBox::new(-10.0, 0.0, 10.0, 5.0).unwrap(),
            components: vec![
                MixtureComponent { center: centers[0], std: 0.05, weight: 0.9 },
                MixtureComponent { center: centers[1], std: 0.05, weight: 0.1 },
            ],
        };
        let d = gen_synthetic(SyntheticKind::GaussianMixture, 10_000, 3, &params).unwrap();
        assert_eq!(d.len(), 10_000);
        let b = params.bbox;
        let mut near_first = 0;
        for p in d.points() {
            assert!(b.contains(p));
            let u = ((p.x - b.min_x) / b.width(), (p.y - b.min_y) / b.height());
            let d0 = (u.0 - centers[0].0).powi(2) + (u.1 - centers[0].1).powi(2);
            let d1 = (u.0 - centers[1].0).powi(2) + (u.1 - centers[1].1).powi(2);
            if d0 < d1 {
                near_first += 1;
            }
        }
        assert!(near_first as f64 >= 0.85 * 10_000.0, "{near_first}");
    }

    #[test]
    fn mixture_rejects_bad_params() {
        let bad = MixtureParams {
            bbox: BBox::unit(),
            components: vec![MixtureComponent { center: (0.5, 0.5), std: 0.0, weight: 1.0 }],
        };
        assert!(matches!(
            gen_synthetic(SyntheticKind::GaussianMixture, 10, 1, &bad),
            Err(DataError::InvalidMixture(_))
        ));
        let unnormalized = MixtureParams {
            bbox: BBox::unit(),
            components: vec![MixtureComponent { center: (0.5, 0.5), std: 0.1, weight: 0.5 }],
        };
        assert!(unnormalized.validate().is_err());
    }

    #[test]
    fn histogram_cell_centers() {
        let d = Dataset::new(vec![
            Point::new(0.25, 0.25),
            Point::new(0.75, 0.25),
            Point::new(0.25, 0.75),
            Point::new(0.75, 0.75),
        ])
        .unwrap();
        let h = build_histogram(&d, &grid2()).unwrap();
        assert_eq!(h.counts(), &[1, 1, 1, 1]);
    }

    #[test]
    fn max_corner_clamps_to_last_cell() {
        let d = Dataset::new(vec![Point::new(1.0, 1.0)]).unwrap();
        let h = build_histogram(&d, &grid2()).unwrap();
        assert_eq!(h.count(1, 1), 1);
        assert_eq!(h.total(), 1);
    }

    #[test]
    fn histogram_rejects_outside_points() {
        let d = Dataset::new(vec![Point::new(0.5, 0.5), Point::new(1.5, 0.5)]).unwrap();
        assert!(matches!(
            build_histogram(&d, &grid2()),
            Err(DataError::OutsideGrid { index: 1, .. })
        ));
    }

    #[test]
    fn histogram_conserves_mass() {
        let d = gen_synthetic(SyntheticKind::Uniform, 1000, 9, &MixtureParams::default()).unwrap();
        let grid = GridSpec::new(d.bbox(), 30).unwrap();
        let h = build_histogram(&d, &grid).unwrap();
        assert_eq!(h.counts().iter().sum::<u64>(), 1000);
        assert_eq!(h.total(), 1000);
    }

    #[test]
    fn dataset_bbox_is_padded() {
        let d = Dataset::new(vec![Point::new(2.0, 3.0), Point::new(2.0, 5.0)]).unwrap();
        let b = d.bbox();
        assert!(b.min_x < 2.0 && b.max_x > 2.0);
        assert!(b.min_y < 3.0 && b.max_y > 5.0);
        assert!(GridSpec::new(b, 4).is_ok());
    }

    #[test]
    fn grid_rejects_small_g() {
        assert!(GridSpec::new(BBox::unit(), 1).is_err());
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn random_mixture_is_valid_and_seeded() {
        let a = MixtureParams::random(BBox::unit(), 3, 7).unwrap();
        assert_eq!(a.components.len(), 3);
        a.validate().unwrap();
        assert_eq!(a, MixtureParams::random(BBox::unit(), 3, 7).unwrap());
        assert!(MixtureParams::random(BBox::unit(), 0, 7).is_err());
    }
}
