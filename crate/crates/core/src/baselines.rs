//! Classical partitioners expressed as cut sequences on the grid.
//!
//! Each partitioner returns a [`DemoEpisode`]: the cut actions in emission
//! order plus the partitions they produce. All split positions are snapped to
//! grid lines, so the episodes can be replayed through the environment and
//! used as demonstrations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{CellHistogram, GridSpec};
use crate::partition::{CutAction, Dir, PartitionError, PartitionFile, PartitionSet, RectPartition};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BaselineError {
    #[error("partition count {m} out of range: {reason}")]
    BadCount { m: usize, reason: String },
    #[error("rect {0} has no interior grid line on either axis")]
    Unsplittable(RectPartition),
    #[error("histogram has g={found}, grid has g={expected}")]
    GridMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("malformed demo file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Uniform,
    Quadtree,
    Kdbtree,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Uniform, Method::Quadtree, Method::Kdbtree];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Uniform => "Uniform",
            Method::Quadtree => "Quad",
            Method::Kdbtree => "KDB",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Uniform => "uniform",
            Method::Quadtree => "quadtree",
            Method::Kdbtree => "kdbtree",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "grid" => Ok(Method::Uniform),
            "quad" | "quadtree" => Ok(Method::Quadtree),
            "kdb" | "kdbtree" | "kdb-tree" => Ok(Method::Kdbtree),
            other => Err(format!("unknown partitioning method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoEpisode {
    pub method: Method,
    pub actions: Vec<CutAction>,
    pub final_partitions: PartitionSet,
}

impl DemoEpisode {
    /// Replays the actions from a single partition and checks the result.
    pub fn verify(&self) -> Result<bool, PartitionError> {
        let ps = PartitionSet::replay(*self.final_partitions.grid(), &self.actions)?;
        Ok(ps.rects() == self.final_partitions.rects())
    }

    pub fn to_json(&self) -> String {
        let file = DemoFile {
            partition: self.final_partitions.to_file(),
            method: Some(self.method),
            actions: self.actions.iter().map(|a| (a.i, a.j, a.dir)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("demo serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BaselineError> {
        let file: DemoFile =
            serde_json::from_str(text).map_err(|e| BaselineError::Malformed(e.to_string()))?;
        let grid = file.partition.grid_spec()?;
        let actions: Vec<CutAction> = file
            .actions
            .iter()
            .map(|&(i, j, dir)| CutAction::new(i, j, dir))
            .collect();
        let replayed = PartitionSet::replay(grid, &actions)?;
        let stored = file.partition.into_partition_set()?;
        if replayed.rects() != stored.rects() {
            return Err(BaselineError::Malformed(
                "actions do not reproduce the stored rects".into(),
            ));
        }
        Ok(DemoEpisode {
            method: file.method.unwrap_or(Method::Kdbtree),
            actions,
            final_partitions: replayed,
        })
    }
}

/// Partition JSON with an extra `"actions": [[i, j, "right"|"down"], ...]`.
#[derive(Debug, Serialize, Deserialize)]
struct DemoFile {
    #[serde(flatten)]
    partition: PartitionFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    method: Option<Method>,
    actions: Vec<(usize, usize, Dir)>,
}

pub fn run(method: Method, hist: &CellHistogram, grid: &GridSpec, m: usize) -> Result<DemoEpisode, BaselineError> {
    match method {
        Method::Uniform => uniform_actions(grid, m),
        Method::Quadtree => quadtree_actions(hist, grid, m),
        Method::Kdbtree => kdb_actions(hist, grid, m),
    }
}

fn check_grid(hist: &CellHistogram, grid: &GridSpec) -> Result<(), BaselineError> {
    if hist.g() != grid.g {
        return Err(BaselineError::GridMismatch {
            expected: grid.g,
            found: hist.g(),
        });
    }
    Ok(())
}

/// Mass of each column (`vertical = true`) or row of `r`.
fn marginal(hist: &CellHistogram, r: &RectPartition, vertical: bool) -> Vec<u64> {
    if vertical {
        (r.left..r.right)
            .map(|c| (r.top..r.bottom).map(|row| hist.count(row, c)).sum())
            .collect()
    } else {
        (r.top..r.bottom)
            .map(|row| (r.left..r.right).map(|c| hist.count(row, c)).sum())
            .collect()
    }
}

/// Offset `k` in `1..len` minimizing `|mass[..k] - mass[k..]|`; ties go to the
/// lower offset.
pub(crate) fn balanced_offset(mass: &[u64]) -> Option<usize> {
    let total: u64 = mass.iter().sum();
    let mut left = 0u64;
    let mut best: Option<(u64, usize)> = None;
    for k in 1..mass.len() {
        left += mass[k - 1];
        let imbalance = left.abs_diff(total - left);
        if best.is_none_or(|(b, _)| imbalance < b) {
            best = Some((imbalance, k));
        }
    }
    best.map(|(_, k)| k)
}

/// Median split of `r`: along the longer side (ties cut vertically), or the
/// other side when the longer one is a single cell thick.
fn median_split(hist: &CellHistogram, r: &RectPartition) -> Option<CutAction> {
    let prefer_vertical = r.cols() >= r.rows();
    for vertical in [prefer_vertical, !prefer_vertical] {
        let mass = marginal(hist, r, vertical);
        if let Some(k) = balanced_offset(&mass) {
            return Some(if vertical {
                CutAction::down(r.top, r.left + k)
            } else {
                CutAction::right(r.top + k, r.left)
            });
        }
    }
    None
}

/// Index of the most populated rect accepted by `ok`; ties go to the lower index.
fn densest(counts: &[u64], rects: &[RectPartition], ok: impl Fn(&RectPartition) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, r) in rects.iter().enumerate() {
        if ok(r) && best.is_none_or(|b| counts[k] > counts[b]) {
            best = Some(k);
        }
    }
    best
}

fn binary_split_step(hist: &CellHistogram, ps: &mut PartitionSet, actions: &mut Vec<CutAction>) -> Result<(), BaselineError> {
    let counts = ps.partition_counts(hist)?;
    let k = densest(&counts, ps.rects(), |r| r.cells() >= 2).ok_or_else(|| {
        BaselineError::Unsplittable(ps.rects()[densest(&counts, ps.rects(), |_| true).unwrap_or(0)])
    })?;
    let r = ps.rects()[k];
    let a = median_split(hist, &r).ok_or(BaselineError::Unsplittable(r))?;
    ps.apply_cut_mut(&a)?;
    actions.push(a);
    Ok(())
}

/// KDB-tree: repeatedly split the most populated rect at the grid line that
/// best balances its two halves.
pub fn kdb_actions(hist: &CellHistogram, grid: &GridSpec, m: usize) -> Result<DemoEpisode, BaselineError> {
    check_grid(hist, grid)?;
    if m < 2 || m > grid.g {
        return Err(BaselineError::BadCount {
            m,
            reason: format!("need 2 <= m <= g = {}", grid.g),
        });
    }
    let mut ps = PartitionSet::init_single(*grid);
    let mut actions = Vec::with_capacity(m - 1);
    while ps.len() < m {
        binary_split_step(hist, &mut ps, &mut actions)?;
    }
    Ok(DemoEpisode {
        method: Method::Kdbtree,
        actions,
        final_partitions: ps,
    })
}

/// Nearest grid line to `k * g / parts`, rounding halves up.
fn spaced_line(k: usize, g: usize, parts: usize) -> usize {
    (2 * k * g + parts) / (2 * parts)
}

/// Uniform grid of `r x c` rects where `r` is the largest divisor of `m` not
/// above `sqrt(m)`.
pub fn uniform_actions(grid: &GridSpec, m: usize) -> Result<DemoEpisode, BaselineError> {
    let g = grid.g;
    if m == 0 || m > g * g {
        return Err(BaselineError::BadCount {
            m,
            reason: format!("need 1 <= m <= g^2 = {}", g * g),
        });
    }
    let rows = (1..=m).take_while(|r| r * r <= m).filter(|r| m.is_multiple_of(*r)).last().unwrap_or(1);
    let cols = m / rows;
    if cols > g {
        return Err(BaselineError::BadCount {
            m,
            reason: format!("a {rows}x{cols} layout does not fit a {g}x{g} grid"),
        });
    }
    let mut actions = Vec::with_capacity(m - 1);
    let col_lines: Vec<usize> = (1..cols).map(|k| spaced_line(k, g, cols)).collect();
    let row_lines: Vec<usize> = (1..rows).map(|k| spaced_line(k, g, rows)).collect();
    for &c in &col_lines {
        actions.push(CutAction::down(0, c));
    }
    for &left in std::iter::once(&0).chain(col_lines.iter()) {
        for &r in &row_lines {
            actions.push(CutAction::right(r, left));
        }
    }
    let ps = PartitionSet::replay(*grid, &actions)?;
    Ok(DemoEpisode {
        method: Method::Uniform,
        actions,
        final_partitions: ps,
    })
}

/// Quad-tree: split the most populated rect into four at its midpoint lines
/// while that does not overshoot `m`, then finish with median binary splits.
pub fn quadtree_actions(hist: &CellHistogram, grid: &GridSpec, m: usize) -> Result<DemoEpisode, BaselineError> {
    check_grid(hist, grid)?;
    if m == 0 || m > grid.g * grid.g {
        return Err(BaselineError::BadCount {
            m,
            reason: format!("need 1 <= m <= g^2 = {}", grid.g * grid.g),
        });
    }
    let mut ps = PartitionSet::init_single(*grid);
    let mut actions = Vec::with_capacity(m.saturating_sub(1));
    while ps.len() + 3 <= m {
        let counts = ps.partition_counts(hist)?;
        let Some(k) = densest(&counts, ps.rects(), |r| r.rows() >= 2 && r.cols() >= 2) else {
            break;
        };
        let r = ps.rects()[k];
        let mid_col = r.left + r.cols() / 2;
        let mid_row = r.top + r.rows() / 2;
        for a in [
            CutAction::down(r.top, mid_col),
            CutAction::right(mid_row, r.left),
            CutAction::right(mid_row, mid_col),
        ] {
            ps.apply_cut_mut(&a)?;
            actions.push(a);
        }
    }
    while ps.len() < m {
        binary_split_step(hist, &mut ps, &mut actions)?;
    }
    Ok(DemoEpisode {
        method: Method::Quadtree,
        actions,
        final_partitions: ps,
    })
}
