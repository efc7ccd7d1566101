//! Prioritized replay memories and n-step transition construction.
//!
//! Two memories are kept: a demo memory that never evicts and an agent
//! memory that is a ring buffer. Both sample proportionally to
//! `priority^alpha` through a sum tree; mini-batches mix the two at a fixed
//! demo ratio.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::env::StateVector;

pub const DEMO_MAGIC: &str = "SPARTD";
pub const DEMO_VERSION: &str = "v1";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReplayError {
    #[error("both memories are empty")]
    Empty,
    #[error("slot {slot} out of range (memory holds {len})")]
    OutOfRange { slot: usize, len: usize },
    #[error("{0} priorities for {1} slots")]
    LengthMismatch(usize, usize),
    #[error("demo file {path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Arc<StateVector>,
    /// Action index (see [`crate::env::action_index`]).
    pub action: usize,
    /// Discounted reward accumulated over `steps` steps.
    pub ret: f64,
    pub s_next: Arc<StateVector>,
    pub steps: usize,
    /// The window reached the end of the episode; no bootstrap term.
    pub terminal: bool,
    pub is_demo: bool,
}

/// Binary tree of partial sums over a power-of-two number of leaves.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        SumTree {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn capacity(&self) -> usize {
        self.leaves
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, k: usize) -> f64 {
        self.nodes[self.leaves + k]
    }

    /// Sets leaf `k`, growing the tree when `k` is past the end.
    pub fn set(&mut self, k: usize, value: f64) {
        if k >= self.leaves {
            self.grow(k + 1);
        }
        let mut idx = self.leaves + k;
        self.nodes[idx] = value;
        while idx > 1 {
            idx /= 2;
            self.nodes[idx] = self.nodes[2 * idx] + self.nodes[2 * idx + 1];
        }
    }

    fn grow(&mut self, min_leaves: usize) {
        let old: Vec<f64> = self.nodes[self.leaves..].to_vec();
        *self = SumTree::new(min_leaves.max(2 * self.leaves));
        self.nodes[self.leaves..self.leaves + old.len()].copy_from_slice(&old);
        for idx in (1..self.leaves).rev() {
            self.nodes[idx] = self.nodes[2 * idx] + self.nodes[2 * idx + 1];
        }
    }

    /// Leaf whose prefix-sum interval contains `mass` (`0 <= mass < total`).
    pub fn find(&self, mass: f64) -> usize {
        let mut idx = 1;
        let mut rest = mass;
        while idx < self.leaves {
            let left = 2 * idx;
            if rest < self.nodes[left] || self.nodes[left + 1] <= 0.0 {
                idx = left;
            } else {
                rest -= self.nodes[left];
                idx = left + 1;
            }
        }
        idx - self.leaves
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerConfig {
    pub alpha: f64,
    /// Added to `|td|` so no priority reaches zero.
    pub eps: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        PerConfig { alpha: 0.6, eps: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct PrioritizedMemory {
    items: Vec<Transition>,
    priorities: Vec<f64>,
    tree: SumTree,
    /// `None` means unbounded.
    capacity: Option<usize>,
    next: usize,
    config: PerConfig,
}

impl PrioritizedMemory {
    /// Ring buffer that evicts the oldest entry once `capacity` is reached.
    pub fn bounded(capacity: usize, config: PerConfig) -> Self {
        assert!(capacity > 0);
        PrioritizedMemory {
            items: Vec::new(),
            priorities: Vec::new(),
            tree: SumTree::new(capacity),
            capacity: Some(capacity),
            next: 0,
            config,
        }
    }

    /// Memory that only grows; `initial` sizes the first allocation.
    pub fn unbounded(initial: usize, config: PerConfig) -> Self {
        PrioritizedMemory {
            items: Vec::with_capacity(initial),
            priorities: Vec::with_capacity(initial),
            tree: SumTree::new(initial),
            capacity: None,
            next: 0,
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.items.get(slot)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn priority(&self, slot: usize) -> f64 {
        self.priorities[slot]
    }

    /// Sum of `priority^alpha` over stored transitions.
    pub fn total(&self) -> f64 {
        self.tree.total()
    }

    pub fn max_priority(&self) -> f64 {
        self.priorities.iter().copied().fold(0.0, f64::max)
    }

    /// Sampling probability of `slot`.
    pub fn probability(&self, slot: usize) -> f64 {
        self.tree.get(slot) / self.tree.total()
    }

    /// Stores `t` at the current maximum priority (1.0 when empty) and
    /// returns its slot.
    pub fn push(&mut self, t: Transition) -> usize {
        let p = if self.items.is_empty() { 1.0 } else { self.max_priority() };
        let slot = match self.capacity {
            Some(cap) if self.items.len() == cap => {
                let slot = self.next;
                self.items[slot] = t;
                self.priorities[slot] = p;
                self.next = (self.next + 1) % cap;
                slot
            }
            _ => {
                self.items.push(t);
                self.priorities.push(p);
                self.items.len() - 1
            }
        };
        self.tree.set(slot, p.powf(self.config.alpha));
        slot
    }

    pub fn sample_slot<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        if self.items.is_empty() {
            return None;
        }
        let mass = rng.gen::<f64>() * self.tree.total();
        Some(self.tree.find(mass).min(self.items.len() - 1))
    }

    /// Sets `priority = |td| + eps` for each slot.
    pub fn update_priorities(&mut self, slots: &[usize], td_errors: &[f64]) -> Result<(), ReplayError> {
        if slots.len() != td_errors.len() {
            return Err(ReplayError::LengthMismatch(td_errors.len(), slots.len()));
        }
        if let Some(&slot) = slots.iter().find(|&&s| s >= self.items.len()) {
            return Err(ReplayError::OutOfRange {
                slot,
                len: self.items.len(),
            });
        }
        for (&slot, td) in slots.iter().zip(td_errors) {
            let p = td.abs() + self.config.eps;
            self.priorities[slot] = p;
            self.tree.set(slot, p.powf(self.config.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Demo,
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub source: Source,
    pub slot: usize,
}

#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub transitions: Vec<Transition>,
    pub refs: Vec<SampleRef>,
    /// Importance weights, normalized so the largest is 1.
    pub weights: Vec<f64>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn demo_count(&self) -> usize {
        self.refs.iter().filter(|r| r.source == Source::Demo).count()
    }
}

/// Split of a batch between the two memories: `ceil(rho * batch)` demo
/// draws, the rest from the agent memory. Whatever one side cannot supply
/// moves to the other.
pub fn batch_split(batch: usize, rho: f64, demo_len: usize, agent_len: usize) -> (usize, usize) {
    let want_demo = ((rho * batch as f64).ceil() as usize).min(batch);
    let mut agent = (batch - want_demo).min(agent_len);
    let mut demo = batch - agent;
    if demo_len == 0 {
        demo = 0;
        agent = if agent_len == 0 { 0 } else { batch };
    }
    (demo, agent)
}

/// Samples `batch` transitions: `ceil(rho * batch)` from `demo`, the rest
/// from `agent`, each proportionally to priority. Importance weights are
/// `(N * P(k))^-beta` with `N` the size of the source memory.
pub fn sample_mixed<R: Rng + ?Sized>(
    demo: &PrioritizedMemory,
    agent: &PrioritizedMemory,
    batch: usize,
    rho: f64,
    beta: f64,
    rng: &mut R,
) -> Result<MixedBatch, ReplayError> {
    if demo.is_empty() && agent.is_empty() {
        return Err(ReplayError::Empty);
    }
    let (n_demo, n_agent) = batch_split(batch, rho, demo.len(), agent.len());
    let mut out = MixedBatch {
        transitions: Vec::with_capacity(batch),
        refs: Vec::with_capacity(batch),
        weights: Vec::with_capacity(batch),
    };
    for (mem, source, count) in [(demo, Source::Demo, n_demo), (agent, Source::Agent, n_agent)] {
        for _ in 0..count {
            let slot = mem.sample_slot(rng).expect("memory is non-empty");
            let w = (mem.len() as f64 * mem.probability(slot)).powf(-beta);
            out.transitions.push(mem.items[slot].clone());
            out.refs.push(SampleRef { source, slot });
            out.weights.push(w);
        }
    }
    let max_w = out.weights.iter().copied().fold(0.0, f64::max);
    if max_w > 0.0 {
        for w in &mut out.weights {
            *w /= max_w;
        }
    }
    Ok(out)
}

/// Linear schedule from `start` to `end` over `steps` calls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl BetaSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.steps == 0 {
            return self.end;
        }
        let frac = (step as f64 / self.steps as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

/// One environment step as recorded during an episode.
#[derive(Debug, Clone)]
pub struct EpisodeStep {
    pub state: Arc<StateVector>,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NStepBuilder {
    pub n: usize,
    pub gamma: f64,
}

impl Default for NStepBuilder {
    fn default() -> Self {
        NStepBuilder { n: 3, gamma: 0.99 }
    }
}

impl NStepBuilder {
    /// One transition per step of a finished episode. `final_state` is the
    /// state after the last action. Windows never run past the episode end.
    pub fn build(&self, episode: &[EpisodeStep], final_state: &Arc<StateVector>, is_demo: bool) -> Vec<Transition> {
        let len = episode.len();
        (0..len)
            .map(|t| {
                let steps = self.n.min(len - t);
                let mut ret = 0.0;
                let mut discount = 1.0;
                for step in &episode[t..t + steps] {
                    ret += discount * step.reward;
                    discount *= self.gamma;
                }
                let terminal = t + steps == len;
                let s_next = if terminal {
                    Arc::clone(final_state)
                } else {
                    Arc::clone(&episode[t + steps].state)
                };
                Transition {
                    s: Arc::clone(&episode[t].state),
                    action: episode[t].action,
                    ret,
                    s_next,
                    steps,
                    terminal,
                    is_demo,
                }
            })
            .collect()
    }
}

fn file_err(path: &Path, msg: impl Into<String>) -> ReplayError {
    ReplayError::File {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// `SPARTD v1 <state_len> <count>\n`, then per transition: action `u32`,
/// steps `u32`, flags `u8` (bit 0 terminal, bit 1 demo), return `f32`, and
/// the two states as `f32`, all little-endian.
pub fn transitions_to_bytes(ts: &[Transition]) -> Vec<u8> {
    let state_len = ts.first().map_or(0, |t| t.s.0.len());
    let mut buf = format!("{DEMO_MAGIC} {DEMO_VERSION} {state_len} {}\n", ts.len()).into_bytes();
    for t in ts {
        buf.extend_from_slice(&(t.action as u32).to_le_bytes());
        buf.extend_from_slice(&(t.steps as u32).to_le_bytes());
        buf.push(t.terminal as u8 | (t.is_demo as u8) << 1);
        buf.extend_from_slice(&(t.ret as f32).to_le_bytes());
        for v in t.s.0.iter().chain(t.s_next.0.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn transitions_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<Transition>, ReplayError> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| file_err(path, "missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| file_err(path, "header is not text"))?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 4 || f[0] != DEMO_MAGIC || f[1] != DEMO_VERSION {
        return Err(file_err(path, format!("bad header {header:?}")));
    }
    let (state_len, count): (usize, usize) = match (f[2].parse(), f[3].parse()) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(file_err(path, format!("bad header {header:?}"))),
    };
    let record = 13 + 8 * state_len;
    let body = &bytes[nl + 1..];
    if body.len() != record * count {
        return Err(file_err(
            path,
            format!("body is {} bytes, expected {}", body.len(), record * count),
        ));
    }
    let f32_at = |b: &[u8], k: usize| f32::from_le_bytes([b[k], b[k + 1], b[k + 2], b[k + 3]]);
    let mut out = Vec::with_capacity(count);
    for rec in body.chunks_exact(record) {
        let action = u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]) as usize;
        let steps = u32::from_le_bytes([rec[4], rec[5], rec[6], rec[7]]) as usize;
        let flags = rec[8];
        let ret = f32_at(rec, 9) as f64;
        let floats: Vec<f32> = (0..2 * state_len).map(|k| f32_at(rec, 13 + 4 * k)).collect();
        out.push(Transition {
            s: Arc::new(StateVector(floats[..state_len].to_vec())),
            action,
            ret,
            s_next: Arc::new(StateVector(floats[state_len..].to_vec())),
            steps,
            terminal: flags & 1 != 0,
            is_demo: flags & 2 != 0,
        });
    }
    Ok(out)
}

pub fn save_transitions(path: impl AsRef<Path>, ts: &[Transition]) -> Result<(), ReplayError> {
    let path = path.as_ref();
    crate::io::write_atomic(path, &transitions_to_bytes(ts)).map_err(|e| file_err(path, e.to_string()))
}

pub fn load_transitions(path: impl AsRef<Path>) -> Result<Vec<Transition>, ReplayError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| file_err(path, e.to_string()))?;
    transitions_from_bytes(&bytes, path)
}
