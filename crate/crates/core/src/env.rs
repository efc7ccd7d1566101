//! The partitioning MDP: state encoding, action indexing, masking and
//! stepping.
//!
//! Each of the `(g+1)^2` grid points contributes three values `(h, v, p)`,
//! point-major. `p` at cell `(i, j)` is `|D_ij| * |P_ij| / |D|^2`, the cell's
//! count times the count of its covering partition over the squared total;
//! it is 0 on the padded last row and column.

use std::sync::Arc;

use crate::data::{CellHistogram, GridSpec};
use crate::partition::{CutAction, Dir, PartitionError, PartitionSet};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("episode already finished after {0} steps")]
    Finished(usize),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("environment needs m >= 2 and a non-empty histogram matching the grid: {0}")]
    Setup(String),
}

/// Flattened state fed to the Q-network.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(pub Vec<f32>);

impl StateVector {
    pub fn len_for(g: usize) -> usize {
        (g + 1) * (g + 1) * 3
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Grid size implied by the vector length.
    pub fn grid_size(&self) -> Option<usize> {
        let points = self.0.len() / 3;
        let side = (points as f64).sqrt().round() as usize;
        (side >= 3 && side * side * 3 == self.0.len()).then(|| side - 1)
    }

    pub fn h(&self, g: usize, i: usize, j: usize) -> f32 {
        self.0[(i * (g + 1) + j) * 3]
    }

    pub fn v(&self, g: usize, i: usize, j: usize) -> f32 {
        self.0[(i * (g + 1) + j) * 3 + 1]
    }

    pub fn p(&self, g: usize, i: usize, j: usize) -> f32 {
        self.0[(i * (g + 1) + j) * 3 + 2]
    }
}

pub fn num_actions(g: usize) -> usize {
    2 * g * g
}

/// `(i * g + j) * 2 + (0 for right, 1 for down)`.
pub fn action_index(g: usize, a: &CutAction) -> usize {
    (a.i * g + a.j) * 2 + matches!(a.dir, Dir::Down) as usize
}

pub fn index_action(g: usize, idx: usize) -> CutAction {
    let cell = idx / 2;
    let dir = if idx.is_multiple_of(2) { Dir::Right } else { Dir::Down };
    CutAction::new(cell / g, cell % g, dir)
}

pub fn encode_state(ps: &PartitionSet, hist: &CellHistogram) -> StateVector {
    let g = ps.g();
    let total = hist.total() as f64;
    let denom = total * total;
    let counts = ps.partition_counts(hist).expect("histogram matches partition grid");
    let b = ps.bounds();
    let mut out = Vec::with_capacity(StateVector::len_for(g));
    for i in 0..=g {
        for j in 0..=g {
            out.push(b.h(i, j) as u8 as f32);
            out.push(b.v(i, j) as u8 as f32);
            let p = if i < g && j < g && denom > 0.0 {
                let part = counts[ps.owner_of(i, j)] as f64;
                (hist.count(i, j) as f64 * part / denom) as f32
            } else {
                0.0
            };
            out.push(p);
        }
    }
    StateVector(out)
}

/// Validity of every action index, read off the `h`/`v` channels alone.
pub fn mask_from_state(s: &StateVector, g: usize) -> Vec<bool> {
    let mut mask = vec![false; num_actions(g)];
    for i in 0..g {
        for j in 0..g {
            let h = s.h(g, i, j) > 0.5;
            let v = s.v(g, i, j) > 0.5;
            let base = (i * g + j) * 2;
            mask[base] = !h && v;
            mask[base + 1] = h && !v;
        }
    }
    mask
}

pub fn valid_mask(ps: &PartitionSet) -> Vec<bool> {
    let g = ps.g();
    (0..num_actions(g))
        .map(|idx| ps.is_valid_cut(&index_action(g, idx)))
        .collect()
}

/// Shared, immutable episode context.
#[derive(Debug, Clone)]
pub struct PartitionEnv {
    grid: GridSpec,
    hist: Arc<CellHistogram>,
    m: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub ps: PartitionSet,
    pub t: usize,
}

impl PartitionEnv {
    /// `m` is the number of workers, i.e. partitions at episode end.
    pub fn new(grid: GridSpec, hist: Arc<CellHistogram>, m: usize) -> Result<Self, EnvError> {
        if m < 2 {
            return Err(EnvError::Setup(format!("m = {m}")));
        }
        if hist.g() != grid.g || hist.total() == 0 {
            return Err(EnvError::Setup(format!("histogram g={} total={}", hist.g(), hist.total())));
        }
        Ok(PartitionEnv { grid, hist, m })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn g(&self) -> usize {
        self.grid.g
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn hist(&self) -> &CellHistogram {
        &self.hist
    }

    /// Steps per episode.
    pub fn horizon(&self) -> usize {
        self.m - 1
    }

    pub fn reset(&self) -> EnvState {
        EnvState {
            ps: PartitionSet::init_single(self.grid),
            t: 0,
        }
    }

    pub fn encode(&self, s: &EnvState) -> StateVector {
        encode_state(&s.ps, &self.hist)
    }

    pub fn mask(&self, s: &EnvState) -> Vec<bool> {
        valid_mask(&s.ps)
    }

    /// Applies `a` and returns whether the episode is over. On error the
    /// state is left untouched. Intermediate rewards are always 0; the
    /// terminal reward comes from the workload evaluation.
    pub fn step(&self, s: &mut EnvState, a: &CutAction) -> Result<bool, EnvError> {
        if s.t >= self.horizon() {
            return Err(EnvError::Finished(s.t));
        }
        s.ps.apply_cut_mut(a)?;
        s.t += 1;
        Ok(s.t == self.horizon())
    }

    /// Runs a fixed action sequence from the initial state.
    pub fn rollout(&self, actions: &[CutAction]) -> Result<EnvState, EnvError> {
        let mut s = self.reset();
        for a in actions {
            self.step(&mut s, a)?;
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BBox;

    fn setup(g: usize, counts: Vec<u64>, m: usize) -> PartitionEnv {
        let grid = GridSpec::new(BBox::unit(), g).unwrap();
        let hist = Arc::new(CellHistogram::from_counts(g, counts).unwrap());
        PartitionEnv::new(grid, hist, m).unwrap()
    }

    #[test]
    fn index_round_trip() {
        let g = 7;
        for idx in 0..num_actions(g) {
            assert_eq!(action_index(g, &index_action(g, idx)), idx);
        }
        assert_eq!(action_index(g, &CutAction::down(0, 0)), 1);
        assert_eq!(action_index(g, &CutAction::right(1, 2)), (7 + 2) * 2);
    }

    #[test]
    fn state_length_and_padding() {
        let env = setup(30, vec![1; 900], 8);
        let s = env.encode(&env.reset());
        assert_eq!(s.0.len(), 2883);
        assert_eq!(s.grid_size(), Some(30));
        for k in 0..=30 {
            assert_eq!(s.p(30, 30, k), 0.0);
            assert_eq!(s.p(30, k, 30), 0.0);
        }
    }

    #[test]
    fn initial_p_is_cell_share() {
        let counts: Vec<u64> = (0..16).collect();
        let env = setup(4, counts.clone(), 3);
        let s = env.encode(&env.reset());
        let total: u64 = counts.iter().sum();
        for i in 0..4 {
            for j in 0..4 {
                let expect = (counts[i * 4 + j] as f64 / total as f64) as f32;
                assert_eq!(s.p(4, i, j), expect);
            }
        }
    }

    #[test]
    fn p_substitution() {
        // |D| = 100, the cell holds 10, its partition holds 50
        let mut counts = vec![0u64; 4];
        counts[0] = 10;
        counts[2] = 40;
        counts[1] = 50;
        let env = setup(2, counts, 2);
        let mut st = env.reset();
        env.step(&mut st, &CutAction::down(0, 1)).unwrap();
        let s = env.encode(&st);
        assert_eq!(s.p(2, 0, 0), 0.05);
    }

    #[test]
    fn cut_shrinks_p_of_affected_cell() {
        let env = setup(5, (1..=25).collect(), 3);
        let mut st = env.reset();
        let before = env.encode(&st).p(5, 2, 3);
        env.step(&mut st, &CutAction::down(0, 3)).unwrap();
        let mid = env.encode(&st).p(5, 2, 3);
        env.step(&mut st, &CutAction::right(2, 3)).unwrap();
        let after = env.encode(&st).p(5, 2, 3);
        assert!(before > mid && mid > after);
        assert_eq!(env.hist().count(2, 3), 14);
    }

    #[test]
    fn mask_matches_enumeration() {
        let env = setup(30, vec![1; 900], 8);
        let st = env.reset();
        let mask = env.mask(&st);
        assert_eq!(mask.iter().filter(|b| **b).count(), 58);
        let listed: Vec<usize> = st.ps.enumerate_valid_actions().iter().map(|a| action_index(30, a)).collect();
        let from_mask: Vec<usize> = (0..mask.len()).filter(|&k| mask[k]).collect();
        assert_eq!(listed, from_mask);
        assert_eq!(mask_from_state(&env.encode(&st), 30), mask);
    }

    #[test]
    fn episode_terminates_at_m_minus_one() {
        let env = setup(5, vec![1; 25], 3);
        let mut st = env.reset();
        assert!(!env.step(&mut st, &CutAction::down(0, 3)).unwrap());
        assert!(env.step(&mut st, &CutAction::right(2, 3)).unwrap());
        assert_eq!(st.ps.len(), 3);
        assert_eq!(env.step(&mut st, &CutAction::right(2, 0)), Err(EnvError::Finished(2)));

        let env8 = setup(10, vec![1; 100], 8);
        let mut st = env8.reset();
        let mut steps = 0;
        loop {
            let a = st.ps.enumerate_valid_actions()[0];
            steps += 1;
            if env8.step(&mut st, &a).unwrap() {
                break;
            }
        }
        assert_eq!(steps, 7);
        assert_eq!(st.t, 7);
    }

    #[test]
    fn invalid_step_leaves_state() {
        let env = setup(4, vec![1; 16], 3);
        let mut st = env.reset();
        let before = st.clone();
        assert!(env.step(&mut st, &CutAction::down(0, 0)).is_err());
        assert_eq!(st, before);
    }
}
