//! Guillotine partitions of the grid.
//!
//! A [`PartitionSet`] keeps two equivalent views of the same state: the
//! boundary bit matrices `h`/`v` over the `(g+1) x (g+1)` grid points, and the
//! list of rectangles they delimit. Cuts only ever add boundaries.
//!
//! `h[i][j]` is the horizontal segment on row line `i` between column lines
//! `j` and `j+1` (the top side of cell `(i, j)`); `v[i][j]` is the vertical
//! segment on column line `j` between row lines `i` and `i+1` (the left side
//! of cell `(i, j)`). Indices equal to `g` pad the far edges: `h[i][g]` and
//! `v[g][j]` are always 0.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, CellHistogram, DataError, GridSpec};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PartitionError {
    #[error("action {0} is out of range for g={1}")]
    OutOfRange(CutAction, usize),
    #[error("invalid cut {action}: {reason}")]
    InvalidCut { action: CutAction, reason: String },
    #[error("grid mismatch: partitions use g={expected}, histogram uses g={found}")]
    GridMismatch { expected: usize, found: usize },
    #[error("malformed partition file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dir {
    Right,
    Down,
}

impl fmt::Display for Dir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dir::Right => "right",
            Dir::Down => "down",
        })
    }
}

/// Start a boundary at grid point `(i, j)` and extend it in `dir`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CutAction {
    pub i: usize,
    pub j: usize,
    pub dir: Dir,
}

impl CutAction {
    pub fn new(i: usize, j: usize, dir: Dir) -> Self {
        CutAction { i, j, dir }
    }

    pub fn right(i: usize, j: usize) -> Self {
        Self::new(i, j, Dir::Right)
    }

    pub fn down(i: usize, j: usize) -> Self {
        Self::new(i, j, Dir::Down)
    }
}

impl fmt::Display for CutAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.i, self.j, self.dir)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoundaryGrid {
    g: usize,
    h: Vec<bool>,
    v: Vec<bool>,
}

impl BoundaryGrid {
    /// Only the map border is present.
    pub fn border(g: usize) -> Self {
        let n = g + 1;
        let mut b = BoundaryGrid {
            g,
            h: vec![false; n * n],
            v: vec![false; n * n],
        };
        for k in 0..g {
            b.h[k] = true;
            b.h[g * n + k] = true;
            b.v[k * n] = true;
            b.v[k * n + g] = true;
        }
        b
    }

    fn from_rects(g: usize, rects: &[RectPartition]) -> Self {
        let n = g + 1;
        let mut b = BoundaryGrid {
            g,
            h: vec![false; n * n],
            v: vec![false; n * n],
        };
        for r in rects {
            for c in r.left..r.right {
                b.h[r.top * n + c] = true;
                b.h[r.bottom * n + c] = true;
            }
            for row in r.top..r.bottom {
                b.v[row * n + r.left] = true;
                b.v[row * n + r.right] = true;
            }
        }
        b
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn h(&self, i: usize, j: usize) -> bool {
        self.h[i * (self.g + 1) + j]
    }

    pub fn v(&self, i: usize, j: usize) -> bool {
        self.v[i * (self.g + 1) + j]
    }

    /// Count of boundary segments not on the map border.
    pub fn interior_bits(&self) -> usize {
        let g = self.g;
        let mut n = 0;
        for i in 1..g {
            for j in 0..g {
                n += self.h(i, j) as usize;
            }
        }
        for i in 0..g {
            for j in 1..g {
                n += self.v(i, j) as usize;
            }
        }
        n
    }

    /// The boundary-bit validity rule: a rightward cut must start on a
    /// vertical boundary with no horizontal one to its right, and a
    /// downward cut the other way round.
    pub fn allows(&self, a: &CutAction) -> bool {
        if a.i >= self.g || a.j >= self.g {
            return false;
        }
        let (h, v) = (self.h(a.i, a.j), self.v(a.i, a.j));
        match a.dir {
            Dir::Right => !h && v,
            Dir::Down => h && !v,
        }
    }
}

/// Half-open cell ranges `[top, bottom) x [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RectPartition {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl RectPartition {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        RectPartition {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn rows(&self) -> usize {
        self.bottom - self.top
    }

    pub fn cols(&self) -> usize {
        self.right - self.left
    }

    pub fn cells(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn contains_cell(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom && col >= self.left && col < self.right
    }

    /// Map-coordinate extent of the rectangle.
    pub fn bbox(&self, grid: &GridSpec) -> BBox {
        BBox {
            min_x: grid.col_line_x(self.left),
            min_y: grid.row_line_y(self.top),
            max_x: grid.col_line_x(self.right),
            max_y: grid.row_line_y(self.bottom),
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.top, self.left, self.bottom, self.right]
    }
}

impl fmt::Display for RectPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}..{}) x [{}..{})",
            self.top, self.bottom, self.left, self.right
        )
    }
}

#[derive(Debug, Clone)]
pub struct PartitionSet {
    grid: GridSpec,
    bounds: BoundaryGrid,
    rects: Vec<RectPartition>,
    /// rect index per cell, row-major
    owner: Vec<u32>,
}

/// Two partition sets are equal when they carve the same grid into the same
/// rectangles; rectangle order does not matter.
impl PartialEq for PartitionSet {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.bounds == other.bounds
    }
}

impl PartitionSet {
    /// A single partition covering the whole grid.
    pub fn init_single(grid: GridSpec) -> Self {
        let g = grid.g;
        PartitionSet {
            grid,
            bounds: BoundaryGrid::border(g),
            rects: vec![RectPartition::new(0, 0, g, g)],
            owner: vec![0; g * g],
        }
    }

    /// Builds a partition set from an explicit rectangle list, checking that
    /// the rectangles tile the grid exactly.
    pub fn from_rects(grid: GridSpec, rects: Vec<RectPartition>) -> Result<Self, PartitionError> {
        let g = grid.g;
        if rects.is_empty() {
            return Err(PartitionError::Malformed("no rectangles".into()));
        }
        let mut owner = vec![u32::MAX; g * g];
        for (k, r) in rects.iter().enumerate() {
            if !(r.top < r.bottom && r.left < r.right && r.bottom <= g && r.right <= g) {
                return Err(PartitionError::Malformed(format!("rect {k} {r} is empty or exceeds g={g}")));
            }
            for row in r.top..r.bottom {
                for col in r.left..r.right {
                    let cell = &mut owner[row * g + col];
                    if *cell != u32::MAX {
                        return Err(PartitionError::Malformed(format!(
                            "rects {} and {k} overlap at cell ({row}, {col})",
                            *cell
                        )));
                    }
                    *cell = k as u32;
                }
            }
        }
        if let Some(idx) = owner.iter().position(|&o| o == u32::MAX) {
            return Err(PartitionError::Malformed(format!(
                "cell ({}, {}) is not covered",
                idx / g,
                idx % g
            )));
        }
        let bounds = BoundaryGrid::from_rects(g, &rects);
        Ok(PartitionSet {
            grid,
            bounds,
            rects,
            owner,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn g(&self) -> usize {
        self.grid.g
    }

    pub fn bounds(&self) -> &BoundaryGrid {
        &self.bounds
    }

    pub fn rects(&self) -> &[RectPartition] {
        &self.rects
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    /// Index into [`rects`](Self::rects) of the rectangle covering cell `(row, col)`.
    pub fn owner_of(&self, row: usize, col: usize) -> usize {
        self.owner[row * self.grid.g + col] as usize
    }

    /// Rectangles sorted by position; handy for order-independent comparison.
    pub fn sorted_rects(&self) -> Vec<RectPartition> {
        let mut r = self.rects.clone();
        r.sort();
        r
    }

    pub fn is_valid_cut(&self, a: &CutAction) -> bool {
        self.bounds.allows(a)
    }

    /// The rectangle-based reading of validity: the start point lies on the
    /// left (top) edge of some rectangle, strictly between its corners.
    pub fn split_target(&self, a: &CutAction) -> Option<usize> {
        let g = self.grid.g;
        if a.i >= g || a.j >= g {
            return None;
        }
        let k = self.owner_of(a.i, a.j);
        let r = &self.rects[k];
        let ok = match a.dir {
            Dir::Right => r.left == a.j && r.top < a.i,
            Dir::Down => r.top == a.i && r.left < a.j,
        };
        ok.then_some(k)
    }

    fn reject(&self, a: &CutAction) -> PartitionError {
        let g = self.grid.g;
        if a.i >= g || a.j >= g {
            return PartitionError::OutOfRange(*a, g);
        }
        let (h, v) = (self.bounds.h(a.i, a.j), self.bounds.v(a.i, a.j));
        let reason = match a.dir {
            Dir::Right if h => "a horizontal boundary already starts here (h=1)".to_string(),
            Dir::Right => format!("no vertical boundary at the start point (v={})", v as u8),
            Dir::Down if v => "a vertical boundary already starts here (v=1)".to_string(),
            Dir::Down => format!("no horizontal boundary at the start point (h={})", h as u8),
        };
        PartitionError::InvalidCut { action: *a, reason }
    }

    /// Applies a cut in place. The new boundary spans exactly the rectangle
    /// whose edge holds the start point, which is split in two: the original
    /// slot keeps the top/left half and the other half is appended.
    pub fn apply_cut_mut(&mut self, a: &CutAction) -> Result<(), PartitionError> {
        if !self.is_valid_cut(a) {
            return Err(self.reject(a));
        }
        let k = self
            .split_target(a)
            .expect("bit and rectangle validity rules disagree");
        let g = self.grid.g;
        let n = g + 1;
        let r = self.rects[k];
        let (first, second) = match a.dir {
            Dir::Right => {
                for c in r.left..r.right {
                    self.bounds.h[a.i * n + c] = true;
                }
                (
                    RectPartition::new(r.top, r.left, a.i, r.right),
                    RectPartition::new(a.i, r.left, r.bottom, r.right),
                )
            }
            Dir::Down => {
                for row in r.top..r.bottom {
                    self.bounds.v[row * n + a.j] = true;
                }
                (
                    RectPartition::new(r.top, r.left, r.bottom, a.j),
                    RectPartition::new(r.top, a.j, r.bottom, r.right),
                )
            }
        };
        self.rects[k] = first;
        let new_idx = self.rects.len() as u32;
        self.rects.push(second);
        for row in second.top..second.bottom {
            for col in second.left..second.right {
                self.owner[row * g + col] = new_idx;
            }
        }
        Ok(())
    }

    pub fn apply_cut(&self, a: &CutAction) -> Result<PartitionSet, PartitionError> {
        let mut next = self.clone();
        next.apply_cut_mut(a)?;
        Ok(next)
    }

    /// Valid actions in row-major order, `right` before `down` at each point.
    pub fn enumerate_valid_actions(&self) -> Vec<CutAction> {
        let g = self.grid.g;
        let mut out = Vec::new();
        for i in 0..g {
            for j in 0..g {
                for dir in [Dir::Right, Dir::Down] {
                    let a = CutAction::new(i, j, dir);
                    if self.is_valid_cut(&a) {
                        out.push(a);
                    }
                }
            }
        }
        out
    }

    /// Data count per rectangle, in rectangle order.
    pub fn partition_counts(&self, hist: &CellHistogram) -> Result<Vec<u64>, PartitionError> {
        let g = self.grid.g;
        if hist.g() != g {
            return Err(PartitionError::GridMismatch {
                expected: g,
                found: hist.g(),
            });
        }
        let mut counts = vec![0u64; self.rects.len()];
        for (cell, &c) in hist.counts().iter().enumerate() {
            counts[self.owner[cell] as usize] += c;
        }
        Ok(counts)
    }

    /// Replays `actions` from a single partition.
    pub fn replay(grid: GridSpec, actions: &[CutAction]) -> Result<Self, PartitionError> {
        let mut ps = Self::init_single(grid);
        for a in actions {
            ps.apply_cut_mut(a)?;
        }
        Ok(ps)
    }

    pub fn to_file(&self) -> PartitionFile {
        PartitionFile {
            grid: self.grid.g,
            bbox: self.grid.bbox.as_array(),
            rects: self.rects.iter().map(RectPartition::as_array).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("partition serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PartitionError> {
        let file: PartitionFile =
            serde_json::from_str(text).map_err(|e| PartitionError::Malformed(e.to_string()))?;
        file.into_partition_set()
    }
}

/// On-disk partition layout:
/// `{"grid": g, "bbox": [min_x, min_y, max_x, max_y], "rects": [[top, left, bottom, right], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub grid: usize,
    pub bbox: [f64; 4],
    pub rects: Vec<[usize; 4]>,
}

impl PartitionFile {
    pub fn grid_spec(&self) -> Result<GridSpec, PartitionError> {
        let [a, b, c, d] = self.bbox;
        let bbox = BBox::new(a, b, c, d).map_err(malformed)?;
        GridSpec::new(bbox, self.grid).map_err(malformed)
    }

    pub fn into_partition_set(self) -> Result<PartitionSet, PartitionError> {
        let grid = self.grid_spec()?;
        let rects = self
            .rects
            .iter()
            .map(|&[t, l, b, r]| RectPartition::new(t, l, b, r))
            .collect();
        PartitionSet::from_rects(grid, rects)
    }
}

fn malformed(e: DataError) -> PartitionError {
    PartitionError::Malformed(e.to_string())
}
