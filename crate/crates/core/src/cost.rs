//! Distance-join workloads and a deterministic cost oracle standing in for
//! cluster measurement.
//!
//! Every partition goes to its own worker. A worker scans the points inside
//! its rectangle expanded by `eps` and probes candidate pairs through an
//! `eps`-sized bucket grid. A query costs the slowest worker (makespan) plus
//! the shuffle of points replicated into the expanded regions.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GridSpec, Point};
use crate::partition::{PartitionSet, RectPartition};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CostError {
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("invalid cost parameters: {0}")]
    Params(String),
    #[error("report mismatch: {0}")]
    Mismatch(String),
    #[error("cannot compute reward from a pruned report")]
    Pruned,
    #[error("query {0} has zero cost")]
    ZeroCost(usize),
    #[error("cannot read workload {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceJoinQuery {
    pub epsilon: f64,
    pub frequency: f64,
}

/// Distance-join queries with frequencies normalized to sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    queries: Vec<DistanceJoinQuery>,
}

impl Workload {
    /// Takes `(epsilon, raw frequency)` pairs and normalizes the frequencies.
    pub fn new(queries: impl IntoIterator<Item = (f64, f64)>) -> Result<Self, CostError> {
        let raw: Vec<(f64, f64)> = queries.into_iter().collect();
        if raw.is_empty() {
            return Err(CostError::Workload("no queries".into()));
        }
        for (k, &(eps, f)) in raw.iter().enumerate() {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(CostError::Workload(format!("query {k}: epsilon must be positive, got {eps}")));
            }
            if !(f > 0.0 && f.is_finite()) {
                return Err(CostError::Workload(format!("query {k}: frequency must be positive, got {f}")));
            }
        }
        let total: f64 = raw.iter().map(|q| q.1).sum();
        Ok(Workload {
            queries: raw
                .into_iter()
                .map(|(epsilon, f)| DistanceJoinQuery {
                    epsilon,
                    frequency: f / total,
                })
                .collect(),
        })
    }

    /// Builds a workload from `query.N.epsilon` / `query.N.frequency` entries.
    /// Queries are ordered by `N`.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, CostError> {
        let mut slots: BTreeMap<u64, (Option<f64>, Option<f64>)> = BTreeMap::new();
        for (key, value) in entries {
            let parts: Vec<&str> = key.split('.').collect();
            let ["query", n, field] = parts.as_slice() else {
                return Err(CostError::Workload(format!("unknown key {key:?}")));
            };
            let n: u64 = n
                .parse()
                .map_err(|_| CostError::Workload(format!("bad query index in {key:?}")))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| CostError::Workload(format!("{key}: not a number: {value:?}")))?;
            let slot = slots.entry(n).or_default();
            match *field {
                "epsilon" => slot.0 = Some(v),
                "frequency" => slot.1 = Some(v),
                _ => return Err(CostError::Workload(format!("unknown key {key:?}"))),
            }
        }
        let mut queries = Vec::with_capacity(slots.len());
        for (n, (eps, f)) in slots {
            match (eps, f) {
                (Some(e), Some(f)) => queries.push((e, f)),
                (None, _) => return Err(CostError::Workload(format!("query.{n}.epsilon missing"))),
                (_, None) => return Err(CostError::Workload(format!("query.{n}.frequency missing"))),
            }
        }
        Workload::new(queries)
    }

    /// Parses the line-oriented `key = value` format.
    pub fn parse(text: &str) -> Result<Self, CostError> {
        let entries = parse_key_values(text).map_err(CostError::Workload)?;
        Workload::from_entries(entries.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CostError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CostError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Workload::parse(&text)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        for (n, q) in self.queries.iter().enumerate() {
            s.push_str(&format!("query.{}.epsilon = {}\n", n + 1, q.epsilon));
            s.push_str(&format!("query.{}.frequency = {}\n", n + 1, q.frequency));
        }
        s
    }

    pub fn queries(&self) -> &[DistanceJoinQuery] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Frequency-weighted sum of per-query values.
    pub fn weighted(&self, per_query: &[f64]) -> f64 {
        self.queries
            .iter()
            .zip(per_query)
            .map(|(q, c)| q.frequency * c)
            .sum()
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("line {}: expected key = value, got {line:?}", idx + 1));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Cost per point scanned by a worker.
    pub c_point: f64,
    /// Cost per candidate pair probed.
    pub c_pair: f64,
    /// Cost per point replicated to another worker.
    pub c_shuffle: f64,
    /// A query is abandoned once it exceeds this multiple of the best cost.
    pub prune_factor: f64,
    /// Reward assigned to an abandoned workload.
    pub prune_reward: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            c_point: 1.0,
            c_pair: 1.0,
            c_shuffle: 5.0,
            prune_factor: 2.0,
            prune_reward: 0.2,
        }
    }
}

impl CostParams {
    /// Preset for workers with a local spatial index: probing is cheaper.
    pub fn with_local_index() -> Self {
        CostParams {
            c_pair: 0.25,
            ..CostParams::default()
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let all = [self.c_point, self.c_pair, self.c_shuffle, self.prune_reward];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(CostError::Params("costs and prune reward must be non-negative".into()));
        }
        if !(self.prune_factor > 1.0) {
            return Err(CostError::Params(format!(
                "prune factor must exceed 1, got {}",
                self.prune_factor
            )));
        }
        Ok(())
    }
}

/// Per-query workload costs. A pruned report holds the queries evaluated up
/// to and including the one that tripped the limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_query: Vec<f64>,
    pub pruned: bool,
}

impl CostReport {
    /// Frequency-weighted total, `None` for pruned reports.
    pub fn weighted_cost(&self, w: &Workload) -> Option<f64> {
        (!self.pruned && self.per_query.len() == w.len()).then(|| w.weighted(&self.per_query))
    }
}

/// Anything that can price one distance join on a partition set. The shipped
/// implementation is [`JoinCostModel`]; a measuring adapter would time real
/// executions instead.
pub trait CostOracle: Sync {
    fn query_cost(&self, ps: &PartitionSet, eps: f64) -> Result<f64, CostError>;
}

/// Median of `repeats` evaluations of an inner oracle, for noisy oracles
/// such as wall-clock measurement.
#[derive(Debug, Clone)]
pub struct MedianOfRuns<O> {
    pub inner: O,
    pub repeats: usize,
}

impl<O: CostOracle> CostOracle for MedianOfRuns<O> {
    fn query_cost(&self, ps: &PartitionSet, eps: f64) -> Result<f64, CostError> {
        let mut runs = (0..self.repeats.max(1))
            .map(|_| self.inner.query_cost(ps, eps))
            .collect::<Result<Vec<_>, _>>()?;
        runs.sort_by(f64::total_cmp);
        Ok(runs[runs.len() / 2])
    }
}

/// Work done by one worker for one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LocalJoinStats {
    /// Points the worker owns.
    pub owned: u64,
    /// Points inside the eps-expanded rectangle (owned plus replicas).
    pub expanded: u64,
    /// Candidate pairs probed through the bucket grid.
    pub candidates: u64,
}

impl LocalJoinStats {
    pub fn cost(&self, p: &CostParams) -> f64 {
        p.c_point * self.expanded as f64 + p.c_pair * self.candidates as f64
    }
}

/// Points with their grid cells precomputed.
#[derive(Debug, Clone)]
struct CellIndex<'a> {
    points: &'a [Point],
    cells: Vec<Option<(usize, usize)>>,
}

impl<'a> CellIndex<'a> {
    fn new(d: &'a Dataset, grid: &GridSpec) -> Self {
        CellIndex {
            points: d.points(),
            cells: d.points().iter().map(|p| grid.cell_of(p)).collect(),
        }
    }

    fn local_stats(&self, r: &RectPartition, grid: &GridSpec, eps: f64) -> LocalJoinStats {
        let b = r.bbox(grid);
        let (x0, y0) = (b.min_x - eps, b.min_y - eps);
        let (x1, y1) = (b.max_x + eps, b.max_y + eps);
        let mut stats = LocalJoinStats::default();
        let mut buckets: HashMap<(i64, i64), u64> = HashMap::new();
        for (p, cell) in self.points.iter().zip(&self.cells) {
            let owned = cell.is_some_and(|(row, col)| r.contains_cell(row, col));
            let near = p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1;
            if !(owned || near) {
                continue;
            }
            stats.owned += owned as u64;
            stats.expanded += 1;
            let key = (((p.x - x0) / eps).floor() as i64, ((p.y - y0) / eps).floor() as i64);
            *buckets.entry(key).or_insert(0) += 1;
        }
        stats.candidates = bucket_candidates(&buckets);
        stats
    }
}

/// `sum_b n_b * (n_b + sum of the 8 neighbouring bucket counts)`.
fn bucket_candidates(buckets: &HashMap<(i64, i64), u64>) -> u64 {
    let mut total = 0u64;
    for (&(bx, by), &n) in buckets {
        let mut around = n;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if (dx, dy) != (0, 0) {
                    around += buckets.get(&(bx + dx, by + dy)).copied().unwrap_or(0);
                }
            }
        }
        total += n * around;
    }
    total
}

/// Join statistics for rectangle `r` alone.
pub fn local_join_stats(d: &Dataset, r: &RectPartition, grid: &GridSpec, eps: f64) -> LocalJoinStats {
    CellIndex::new(d, grid).local_stats(r, grid, eps)
}

/// `c_point * N_eps + c_pair * candidates` for one worker.
pub fn local_join_cost(d: &Dataset, r: &RectPartition, grid: &GridSpec, eps: f64, p: &CostParams) -> f64 {
    local_join_stats(d, r, grid, eps).cost(p)
}

/// Exact epsilon-distance self join: all index pairs `(a, b)`, `a < b`, with
/// `|p_a - p_b| <= eps`, sorted. Uses the same bucket grid as the cost model.
pub fn distance_join(points: &[Point], eps: f64) -> Vec<(usize, usize)> {
    if points.is_empty() || !(eps > 0.0) {
        return Vec::new();
    }
    let min_x = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let min_y = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let key = |p: &Point| (((p.x - min_x) / eps).floor() as i64, ((p.y - min_y) / eps).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (k, p) in points.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(k);
    }
    let eps2 = eps * eps;
    let mut pairs = Vec::new();
    for (a, p) in points.iter().enumerate() {
        let (bx, by) = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(members) = buckets.get(&(bx + dx, by + dy)) {
                    for &b in members {
                        if b > a && p.dist2(&points[b]) <= eps2 {
                            pairs.push((a, b));
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// The deterministic cost oracle over a fixed dataset.
#[derive(Debug, Clone)]
pub struct JoinCostModel<'a> {
    index: CellIndex<'a>,
    grid: GridSpec,
    params: CostParams,
}

impl<'a> JoinCostModel<'a> {
    pub fn new(data: &'a Dataset, grid: GridSpec, params: CostParams) -> Self {
        JoinCostModel {
            index: CellIndex::new(data, &grid),
            grid,
            params,
        }
    }

    pub fn params(&self) -> &CostParams {
        &self.params
    }

    /// Per-rect statistics, in rect order.
    pub fn rect_stats(&self, ps: &PartitionSet, eps: f64) -> Vec<LocalJoinStats> {
        ps.rects()
            .par_iter()
            .map(|r| self.index.local_stats(r, &self.grid, eps))
            .collect()
    }
}

impl CostOracle for JoinCostModel<'_> {
    fn query_cost(&self, ps: &PartitionSet, eps: f64) -> Result<f64, CostError> {
        if ps.grid() != &self.grid {
            return Err(CostError::Mismatch("partition grid differs from the oracle grid".into()));
        }
        let stats = self.rect_stats(ps, eps);
        let makespan = stats
            .iter()
            .map(|s| s.cost(&self.params))
            .fold(0.0, f64::max);
        let replicated: u64 = stats.iter().map(|s| s.expanded - s.owned).sum();
        Ok(makespan + self.params.c_shuffle * replicated as f64)
    }
}

/// Full evaluation of every query.
pub fn evaluate_workload<O: CostOracle + ?Sized>(
    oracle: &O,
    ps: &PartitionSet,
    w: &Workload,
) -> Result<CostReport, CostError> {
    let per_query = w
        .queries()
        .iter()
        .map(|q| oracle.query_cost(ps, q.epsilon))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CostReport {
        per_query,
        pruned: false,
    })
}

/// Evaluates queries in order and stops at the first one costing more than
/// `prune_factor` times the best partitions' cost for that query.
pub fn evaluate_workload_pruned<O: CostOracle + ?Sized>(
    oracle: &O,
    ps: &PartitionSet,
    w: &Workload,
    best: &CostReport,
    prune_factor: f64,
) -> Result<CostReport, CostError> {
    if best.pruned || best.per_query.len() != w.len() {
        return Err(CostError::Mismatch("best report must be a full evaluation of the workload".into()));
    }
    let mut per_query = Vec::with_capacity(w.len());
    for (q, &limit) in w.queries().iter().zip(&best.per_query) {
        let c = oracle.query_cost(ps, q.epsilon)?;
        per_query.push(c);
        if c > prune_factor * limit {
            return Ok(CostReport {
                per_query,
                pruned: true,
            });
        }
    }
    Ok(CostReport {
        per_query,
        pruned: false,
    })
}

pub fn workload_cost(d: &Dataset, ps: &PartitionSet, w: &Workload, p: &CostParams) -> CostReport {
    let oracle = JoinCostModel::new(d, *ps.grid(), *p);
    evaluate_workload(&oracle, ps, w).expect("oracle grid matches partition grid")
}

pub fn pruned_workload_cost(
    d: &Dataset,
    ps: &PartitionSet,
    w: &Workload,
    p: &CostParams,
    best: &CostReport,
) -> Result<CostReport, CostError> {
    let oracle = JoinCostModel::new(d, *ps.grid(), *p);
    evaluate_workload_pruned(&oracle, ps, w, best, p.prune_factor)
}

/// `(sum_i f_i * C_best_i / C_episode_i)^2`; above 1 means the episode beat
/// the best partitions.
pub fn compute_reward(best: &CostReport, episode: &CostReport, w: &Workload) -> Result<f64, CostError> {
    if best.pruned || episode.pruned {
        return Err(CostError::Pruned);
    }
    if best.per_query.len() != w.len() || episode.per_query.len() != w.len() {
        return Err(CostError::Mismatch(format!(
            "workload has {} queries, reports have {} and {}",
            w.len(),
            best.per_query.len(),
            episode.per_query.len()
        )));
    }
    let mut sum = 0.0;
    for (k, ((q, b), e)) in w.queries().iter().zip(&best.per_query).zip(&episode.per_query).enumerate() {
        if !(*e > 0.0) {
            return Err(CostError::ZeroCost(k));
        }
        sum += q.frequency * b / e;
    }
    Ok(sum * sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, BBox, MixtureParams, SyntheticKind};
    use crate::partition::CutAction;

    fn uniform(n: usize, seed: u64) -> Dataset {
        gen_synthetic(SyntheticKind::Uniform, n, seed, &MixtureParams::default()).unwrap()
    }

    fn report(v: &[f64]) -> CostReport {
        CostReport {
            per_query: v.to_vec(),
            pruned: false,
        }
    }

    #[test]
    fn workload_normalizes_and_parses() {
        let w = Workload::parse(
            "# small skew\nquery.0.epsilon = 0.01\nquery.0.frequency = 25\nquery.1.epsilon=0.02\nquery.1.frequency=50\nquery.2.epsilon = 0.1\nquery.2.frequency = 25\n",
        )
        .unwrap();
        let f: Vec<f64> = w.queries().iter().map(|q| q.frequency).collect();
        assert_eq!(f, vec![0.25, 0.5, 0.25]);
        assert_eq!(w.queries()[2].epsilon, 0.1);
        let again = Workload::parse(&w.to_config_string()).unwrap();
        assert_eq!(again, w);
    }

    #[test]
    fn workload_rejects_bad_entries() {
        assert!(Workload::parse("query.0.epsilon = 1\n").is_err());
        assert!(Workload::parse("query.0.epsilon = -1\nquery.0.frequency = 1\n").is_err());
        assert!(Workload::parse("query.0.radius = 1\n").is_err());
        assert!(Workload::parse("threads = 4\n").is_err());
        assert!(Workload::parse("").is_err());
    }

    #[test]
    fn empty_rect_costs_nothing() {
        let d = Dataset::new(vec![Point::new(0.9, 0.9), Point::new(0.95, 0.95)]).unwrap();
        let grid = GridSpec::new(BBox::unit(), 10).unwrap();
        let r = RectPartition::new(0, 0, 2, 2);
        assert_eq!(local_join_cost(&d, &r, &grid, 0.01, &CostParams::default()), 0.0);
    }

    #[test]
    fn close_pair_is_probed() {
        let d = Dataset::new(vec![Point::new(0.5, 0.5), Point::new(0.505, 0.5)]).unwrap();
        let grid = GridSpec::new(BBox::unit(), 4).unwrap();
        let p = CostParams {
            c_point: 0.0,
            c_pair: 1.0,
            ..CostParams::default()
        };
        let r = RectPartition::new(0, 0, 4, 4);
        assert!(local_join_cost(&d, &r, &grid, 0.01, &p) >= 1.0);
    }

    #[test]
    fn candidates_bound_brute_force_pairs() {
        let grid = GridSpec::new(BBox::unit(), 8).unwrap();
        for seed in 0..10 {
            let d = uniform(300, seed);
            let r = RectPartition::new(2, 1, 6, 5);
            let eps = 0.03 + 0.01 * seed as f64;
            let stats = local_join_stats(&d, &r, &grid, eps);
            let b = r.bbox(&grid);
            let inside: Vec<Point> = d
                .points()
                .iter()
                .copied()
                .filter(|p| p.x >= b.min_x - eps && p.x <= b.max_x + eps && p.y >= b.min_y - eps && p.y <= b.max_y + eps)
                .collect();
            let mut exact = 0u64;
            for a in 0..inside.len() {
                for c in a + 1..inside.len() {
                    exact += (inside[a].dist2(&inside[c]) <= eps * eps) as u64;
                }
            }
            assert_eq!(stats.expanded as usize, inside.len());
            assert!(stats.candidates >= exact, "{} < {exact}", stats.candidates);
        }
    }

    #[test]
    fn distance_join_matches_brute_force() {
        let d = uniform(400, 17);
        let eps = 0.05;
        let mut brute = Vec::new();
        for a in 0..d.len() {
            for b in a + 1..d.len() {
                if d.points()[a].dist2(&d.points()[b]) <= eps * eps {
                    brute.push((a, b));
                }
            }
        }
        assert_eq!(distance_join(d.points(), eps), brute);
    }

    #[test]
    fn single_partition_has_no_shuffle() {
        let d = uniform(2000, 3);
        let grid = GridSpec::new(d.bbox(), 10).unwrap();
        let ps = PartitionSet::init_single(grid);
        let w = Workload::new([(0.02, 1.0), (0.05, 1.0)]).unwrap();
        let with_shuffle = workload_cost(&d, &ps, &w, &CostParams::default());
        let without = workload_cost(
            &d,
            &ps,
            &w,
            &CostParams {
                c_shuffle: 0.0,
                ..CostParams::default()
            },
        );
        assert_eq!(with_shuffle, without);
        assert!(!with_shuffle.pruned);
    }

    #[test]
    fn halves_halve_the_makespan() {
        let d = uniform(10_000, 5);
        let grid = GridSpec::new(d.bbox(), 10).unwrap();
        let p = CostParams {
            c_shuffle: 0.0,
            ..CostParams::default()
        };
        let oracle = JoinCostModel::new(&d, grid, p);
        let single = PartitionSet::init_single(grid);
        let halves = single.apply_cut(&CutAction::down(0, 5)).unwrap();
        let eps = 0.005;
        let whole = oracle.query_cost(&single, eps).unwrap();
        let split = oracle.query_cost(&halves, eps).unwrap();
        let ratio = split / whole;
        assert!((0.4..=0.6).contains(&ratio), "{ratio}");
    }

    #[test]
    fn oracle_is_deterministic() {
        let d = uniform(3000, 8);
        let grid = GridSpec::new(d.bbox(), 8).unwrap();
        let ps = PartitionSet::replay(grid, &[CutAction::down(0, 3), CutAction::right(5, 0)]).unwrap();
        let w = Workload::new([(0.01, 1.0), (0.04, 2.0), (0.1, 1.0)]).unwrap();
        let a = workload_cost(&d, &ps, &w, &CostParams::default());
        let b = workload_cost(&d, &ps, &w, &CostParams::default());
        assert_eq!(a, b);
        assert!(a.per_query.iter().all(|c| *c > 0.0));
    }

    #[test]
    fn reward_examples() {
        let w1 = Workload::new([(1.0, 1.0)]).unwrap();
        assert_eq!(compute_reward(&report(&[2.0]), &report(&[1.0]), &w1).unwrap(), 4.0);
        let w2 = Workload::new([(1.0, 0.5), (2.0, 0.5)]).unwrap();
        let r = compute_reward(&report(&[1.0, 1.0]), &report(&[1.0, 2.0]), &w2).unwrap();
        assert_eq!(r, (0.5f64 + 0.25).powi(2));
        assert_eq!(r, 0.5625);
        let x = report(&[3.0, 7.0]);
        assert_eq!(compute_reward(&x, &x, &w2).unwrap(), 1.0);
    }

    #[test]
    fn reward_errors() {
        let w = Workload::new([(1.0, 1.0)]).unwrap();
        assert_eq!(compute_reward(&report(&[1.0]), &report(&[0.0]), &w), Err(CostError::ZeroCost(0)));
        let pruned = CostReport {
            per_query: vec![5.0],
            pruned: true,
        };
        assert_eq!(compute_reward(&report(&[1.0]), &pruned, &w), Err(CostError::Pruned));
        assert!(compute_reward(&report(&[1.0, 1.0]), &report(&[1.0]), &w).is_err());
    }

    /// Returns fixed per-epsilon costs and counts calls.
    struct Scripted {
        costs: Vec<f64>,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl CostOracle for Scripted {
        fn query_cost(&self, _ps: &PartitionSet, eps: f64) -> Result<f64, CostError> {
            self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(self.costs[eps as usize])
        }
    }

    fn scripted(costs: &[f64]) -> Scripted {
        Scripted {
            costs: costs.to_vec(),
            calls: Default::default(),
        }
    }

    #[test]
    fn pruning_stops_early() {
        let w = Workload::new([(0.5, 1.0), (1.0, 1.0), (2.0, 1.0)]).unwrap();
        let ps = PartitionSet::init_single(GridSpec::new(BBox::unit(), 2).unwrap());
        let best = report(&[1.0, 1.0, 1.0]);

        let o = scripted(&[2.1, 1.0, 1.0]);
        let r = evaluate_workload_pruned(&o, &ps, &w, &best, 2.0).unwrap();
        assert!(r.pruned);
        assert_eq!(r.per_query, vec![2.1]);
        assert_eq!(o.calls.load(std::sync::atomic::Ordering::SeqCst), 1);

        let o = scripted(&[0.9, 1.0, 0.5]);
        let r = evaluate_workload_pruned(&o, &ps, &w, &best, 2.0).unwrap();
        assert!(!r.pruned);
        assert_eq!(r.per_query.len(), 3);

        let o = scripted(&[1.5, 1.9, 2.5]);
        let r = evaluate_workload_pruned(&o, &ps, &w, &best, 2.0).unwrap();
        assert!(r.pruned);
        assert_eq!(r.per_query, vec![1.5, 1.9, 2.5]);
    }

    #[test]
    fn median_of_runs_wraps_an_oracle() {
        let ps = PartitionSet::init_single(GridSpec::new(BBox::unit(), 2).unwrap());
        let o = MedianOfRuns {
            inner: scripted(&[3.0]),
            repeats: 3,
        };
        assert_eq!(o.query_cost(&ps, 0.0).unwrap(), 3.0);
        assert_eq!(o.inner.calls.load(std::sync::atomic::Ordering::SeqCst), 3);
    }

    #[test]
    fn params_validation() {
        assert!(CostParams::default().validate().is_ok());
        assert!(CostParams::with_local_index().validate().is_ok());
        assert_eq!(CostParams::with_local_index().c_pair, 0.25);
        let bad = CostParams {
            prune_factor: 1.0,
            ..CostParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
