//! Losses, exploration and the two training phases.
//!
//! Pre-training fits the network to the demo episode alone. Main training
//! then plays episodes, costs the final partitions against the best set
//! found so far, and keeps training on a mix of demo and agent transitions.

use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{self, BaselineError, DemoEpisode, Method};
use crate::cost::{
    compute_reward, evaluate_workload, evaluate_workload_pruned, CostError, CostOracle, CostParams, CostReport,
    Workload,
};
use crate::data::{CellHistogram, GridSpec};
use crate::env::{index_action, mask_from_state, num_actions, EnvError, PartitionEnv, StateVector};
use crate::neural::{q_network_dims, sync_target, AdamConfig, AdamState, GradientSet, Mlp, NeuralError, Real};
use crate::partition::{PartitionError, PartitionSet};
use crate::replay::{
    sample_mixed, BetaSchedule, EpisodeStep, NStepBuilder, PerConfig, PrioritizedMemory, ReplayError, Source,
    Transition,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("state has no valid action")]
    NoValidAction,
    #[error("scripted episode {episode}: {msg}")]
    Script { episode: usize, msg: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub g: usize,
    /// Number of workers, i.e. partitions per episode.
    pub m: usize,
    /// Main-training episodes.
    pub episodes: usize,
    /// Upper bound on pre-training episodes (one mini-batch each).
    pub pretrain_episodes: usize,
    /// Greedy rollout check interval during pre-training.
    pub pretrain_check: usize,
    /// Target network sync interval, in training steps.
    pub target_sync: usize,
    pub eps_r: f64,
    pub eps_s: f64,
    pub batch: usize,
    pub rho: f64,
    pub n_step: usize,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
    pub lr: f64,
    pub hidden: [usize; 2],
    pub seed: u64,
    pub agent_capacity: usize,
    pub demo_capacity: usize,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub priority_eps: f64,
    pub pretrain: bool,
    pub grid_shift: bool,
    pub prune: bool,
    pub cost: CostParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            g: crate::data::DEFAULT_GRID,
            m: 8,
            episodes: 3000,
            pretrain_episodes: 3000,
            pretrain_check: 10,
            target_sync: 100,
            eps_r: 0.1,
            eps_s: 0.2,
            batch: 32,
            rho: 0.25,
            n_step: 3,
            gamma: 0.99,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1e-5,
            margin: 0.8,
            lr: 1e-3,
            hidden: [1200, 600],
            seed: 0,
            agent_capacity: 10_000,
            demo_capacity: 100,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            priority_eps: 1e-3,
            pretrain: true,
            grid_shift: true,
            prune: true,
            cost: CostParams::default(),
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, TrainError> {
    value
        .trim()
        .parse()
        .map_err(|_| TrainError::Config(format!("cannot parse {key} = {value:?}")))
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`], in output order.
    pub const KEYS: [&'static str; 34] = [
        "grid",
        "m",
        "episodes",
        "pretrain_episodes",
        "pretrain_check",
        "target_sync",
        "eps_r",
        "eps_s",
        "batch",
        "rho",
        "n_step",
        "gamma",
        "lambda1",
        "lambda2",
        "lambda3",
        "margin",
        "lr",
        "hidden1",
        "hidden2",
        "seed",
        "agent_capacity",
        "demo_capacity",
        "alpha",
        "beta_start",
        "beta_end",
        "priority_eps",
        "pretrain",
        "grid_shift",
        "prune",
        "c_point",
        "c_pair",
        "c_shuffle",
        "prune_factor",
        "prune_reward",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let v = value;
        match key {
            "grid" => self.g = parse_value(key, v)?,
            "m" => self.m = parse_value(key, v)?,
            "episodes" => self.episodes = parse_value(key, v)?,
            "pretrain_episodes" => self.pretrain_episodes = parse_value(key, v)?,
            "pretrain_check" => self.pretrain_check = parse_value(key, v)?,
            "target_sync" => self.target_sync = parse_value(key, v)?,
            "eps_r" => self.eps_r = parse_value(key, v)?,
            "eps_s" => self.eps_s = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "rho" => self.rho = parse_value(key, v)?,
            "n_step" => self.n_step = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "lambda1" => self.lambda1 = parse_value(key, v)?,
            "lambda2" => self.lambda2 = parse_value(key, v)?,
            "lambda3" => self.lambda3 = parse_value(key, v)?,
            "margin" => self.margin = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "hidden1" => self.hidden[0] = parse_value(key, v)?,
            "hidden2" => self.hidden[1] = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "agent_capacity" => self.agent_capacity = parse_value(key, v)?,
            "demo_capacity" => self.demo_capacity = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "beta_start" => self.beta_start = parse_value(key, v)?,
            "beta_end" => self.beta_end = parse_value(key, v)?,
            "priority_eps" => self.priority_eps = parse_value(key, v)?,
            "pretrain" => self.pretrain = parse_value(key, v)?,
            "grid_shift" => self.grid_shift = parse_value(key, v)?,
            "prune" => self.prune = parse_value(key, v)?,
            "c_point" => self.cost.c_point = parse_value(key, v)?,
            "c_pair" => self.cost.c_pair = parse_value(key, v)?,
            "c_shuffle" => self.cost.c_shuffle = parse_value(key, v)?,
            "prune_factor" => self.cost.prune_factor = parse_value(key, v)?,
            "prune_reward" => self.cost.prune_reward = parse_value(key, v)?,
            other => return Err(TrainError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "grid" => self.g.to_string(),
            "m" => self.m.to_string(),
            "episodes" => self.episodes.to_string(),
            "pretrain_episodes" => self.pretrain_episodes.to_string(),
            "pretrain_check" => self.pretrain_check.to_string(),
            "target_sync" => self.target_sync.to_string(),
            "eps_r" => self.eps_r.to_string(),
            "eps_s" => self.eps_s.to_string(),
            "batch" => self.batch.to_string(),
            "rho" => self.rho.to_string(),
            "n_step" => self.n_step.to_string(),
            "gamma" => self.gamma.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "lambda3" => self.lambda3.to_string(),
            "margin" => self.margin.to_string(),
            "lr" => self.lr.to_string(),
            "hidden1" => self.hidden[0].to_string(),
            "hidden2" => self.hidden[1].to_string(),
            "seed" => self.seed.to_string(),
            "agent_capacity" => self.agent_capacity.to_string(),
            "demo_capacity" => self.demo_capacity.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "priority_eps" => self.priority_eps.to_string(),
            "pretrain" => self.pretrain.to_string(),
            "grid_shift" => self.grid_shift.to_string(),
            "prune" => self.prune.to_string(),
            "c_point" => self.cost.c_point.to_string(),
            "c_pair" => self.cost.c_pair.to_string(),
            "c_shuffle" => self.cost.c_shuffle.to_string(),
            "prune_factor" => self.cost.prune_factor.to_string(),
            "prune_reward" => self.cost.prune_reward.to_string(),
            _ => return None,
        })
    }

    /// `key = value` lines for every setting.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        let prob = |name: &str, v: f64| -> Result<(), TrainError> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(TrainError::Config(format!("{name} = {v} is not in [0, 1]")))
            }
        };
        for (name, v) in [
            ("eps_r", self.eps_r),
            ("eps_s", self.eps_s),
            ("rho", self.rho),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("beta_start", self.beta_start),
            ("beta_end", self.beta_end),
        ] {
            prob(name, v)?;
        }
        if self.eps_r + self.eps_s > 1.0 {
            return bad(format!("eps_r + eps_s = {} exceeds 1", self.eps_r + self.eps_s));
        }
        if self.g < 2 {
            return bad(format!("grid = {} (need at least 2)", self.g));
        }
        if self.m < 2 || self.m > self.g * self.g {
            return bad(format!("m = {} (need 2 <= m <= grid^2)", self.m));
        }
        for (name, v) in [
            ("batch", self.batch),
            ("n_step", self.n_step),
            ("target_sync", self.target_sync),
            ("pretrain_check", self.pretrain_check),
            ("agent_capacity", self.agent_capacity),
            ("hidden1", self.hidden[0]),
            ("hidden2", self.hidden[1]),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be non-negative"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(self.priority_eps > 0.0) {
            return bad(format!("priority_eps = {} must be positive", self.priority_eps));
        }
        self.cost.validate()?;
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            margin: self.margin,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn exploration(&self) -> Exploration {
        Exploration {
            eps_r: self.eps_r,
            eps_s: self.eps_s,
            grid_shift: self.grid_shift,
        }
    }

    pub fn nstep(&self) -> NStepBuilder {
        NStepBuilder {
            n: self.n_step,
            gamma: self.gamma,
        }
    }

    fn per(&self) -> PerConfig {
        PerConfig {
            alpha: self.alpha,
            eps: self.priority_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        TrainConfig::default().loss()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_n: f64,
    pub l_c: f64,
    pub l_l2: f64,
    pub total: f64,
    /// `target - Q(s, a)` per sample, for priority updates.
    pub td_errors: Vec<f64>,
}

/// Index of the largest value among valid entries; ties go to the lowest
/// index.
pub fn masked_argmax<I: IntoIterator<Item = f64>>(values: I, mask: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, (v, ok)) in values.into_iter().zip(mask).enumerate() {
        if *ok && best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// `max_a [q(a) + margin * (a != a_c)] - q(a_c)` over valid `a`, and the
/// maximizing action.
pub fn large_margin_loss(q: &[f64], mask: &[bool], a_c: usize, margin: f64) -> Option<(f64, usize)> {
    let shifted = q
        .iter()
        .enumerate()
        .map(|(a, v)| if a == a_c { *v } else { v + margin });
    let a_star = masked_argmax(shifted, mask)?;
    let top = q[a_star] + if a_star == a_c { 0.0 } else { margin };
    Some((top - q[a_c], a_star))
}

fn stack<'a, T: Real>(states: impl Iterator<Item = &'a StateVector>, rows: usize, dim: usize) -> Result<Array2<T>, TrainError> {
    let mut x = Array2::<T>::zeros((rows, dim));
    for (mut row, s) in x.rows_mut().into_iter().zip(states) {
        if s.0.len() != dim {
            return Err(TrainError::Config(format!(
                "state of length {} fed to a network with input {dim}",
                s.0.len()
            )));
        }
        for (dst, v) in row.iter_mut().zip(&s.0) {
            *dst = T::of(*v as f64);
        }
    }
    Ok(x)
}

/// Weighted n-step TD loss, large-margin imitation loss on demo samples and
/// L2 on weight matrices, with the gradient of their weighted sum.
pub fn compute_losses<T: Real>(
    batch: &[Transition],
    weights: &[f64],
    main: &Mlp<T>,
    target: &Mlp<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, GradientSet<T>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if weights.len() != batch.len() {
        return Err(TrainError::Config(format!(
            "{} weights for {} samples",
            weights.len(),
            batch.len()
        )));
    }
    let g = batch[0]
        .s
        .grid_size()
        .ok_or_else(|| TrainError::Config("state length does not match any grid".into()))?;
    if main.output_dim() != num_actions(g) {
        return Err(TrainError::Config(format!(
            "network has {} outputs, grid {g} needs {}",
            main.output_dim(),
            num_actions(g)
        )));
    }
    let rows = batch.len();
    let x = stack::<T>(batch.iter().map(|t| &*t.s), rows, main.input_dim())?;
    let xn = stack::<T>(batch.iter().map(|t| &*t.s_next), rows, target.input_dim())?;
    let trace = main.forward_trace(x.view())?;
    let q = trace.output();
    let q_next = target.forward(xn.view())?;

    let mut upstream = Array2::<T>::zeros(q.raw_dim());
    let mut l_n = 0.0;
    let mut l_c = 0.0;
    let mut td_errors = Vec::with_capacity(rows);
    for (k, t) in batch.iter().enumerate() {
        let q_sa = q[[k, t.action]].f64();
        let mut y = t.ret;
        if !t.terminal {
            let mask = mask_from_state(&t.s_next, g);
            let row = q_next.row(k);
            if let Some(a) = masked_argmax(row.iter().map(|v| v.f64()), &mask) {
                y += cfg.gamma.powi(t.steps as i32) * row[a].f64();
            }
        }
        let delta = y - q_sa;
        td_errors.push(delta);
        l_n += weights[k] * delta * delta;
        upstream[[k, t.action]] = upstream[[k, t.action]] + T::of(-2.0 * cfg.lambda1 * weights[k] * delta);

        if t.is_demo {
            let q_row: Vec<f64> = q.row(k).iter().map(|v| v.f64()).collect();
            let mask = mask_from_state(&t.s, g);
            let (loss, a_star) =
                large_margin_loss(&q_row, &mask, t.action, cfg.margin).ok_or(TrainError::NoValidAction)?;
            l_c += loss;
            upstream[[k, a_star]] = upstream[[k, a_star]] + T::of(cfg.lambda2);
            upstream[[k, t.action]] = upstream[[k, t.action]] - T::of(cfg.lambda2);
        }
    }
    let mut grads = main.backward(&trace, upstream.view())?;
    grads.add_l2(main, cfg.lambda3);
    let l_l2 = main.l2_penalty();
    let total = cfg.lambda1 * l_n + cfg.lambda2 * l_c + cfg.lambda3 * l_l2;
    Ok((
        LossBreakdown {
            l_n,
            l_c,
            l_l2,
            total,
            td_errors,
        },
        grads,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exploration {
    pub eps_r: f64,
    pub eps_s: f64,
    /// When off, the shift branch falls through to the greedy action.
    pub grid_shift: bool,
}

impl Exploration {
    pub fn greedy() -> Self {
        Exploration {
            eps_r: 0.0,
            eps_s: 0.0,
            grid_shift: false,
        }
    }
}

fn q_row(s: &StateVector, net: &Mlp<f32>) -> Result<Vec<f64>, TrainError> {
    let x = ArrayView1::from(s.as_slice()).insert_axis(ndarray::Axis(0));
    let q = net.forward(x)?;
    Ok(q.iter().map(|v| *v as f64).collect())
}

/// Masked argmax of the network's Q-values.
pub fn greedy_action(s: &StateVector, mask: &[bool], net: &Mlp<f32>) -> Result<usize, TrainError> {
    masked_argmax(q_row(s, net)?, mask).ok_or(TrainError::NoValidAction)
}

/// Valid actions one grid step away from `idx` with the same direction.
pub fn grid_shift_candidates(g: usize, idx: usize, mask: &[bool]) -> Vec<usize> {
    let a = index_action(g, idx);
    let (i, j) = (a.i as isize, a.j as isize);
    [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
        .into_iter()
        .filter(|&(r, c)| r >= 0 && c >= 0 && (r as usize) < g && (c as usize) < g)
        .map(|(r, c)| (r as usize * g + c as usize) * 2 + idx % 2)
        .filter(|&k| mask[k])
        .collect()
}

/// Draws one uniform number `u`: below `eps_r` picks a uniform valid
/// action; below `eps_r + eps_s` shifts the greedy action by one grid step;
/// otherwise acts greedily. Branches that choose draw once more.
pub fn select_action<R: Rng + ?Sized>(
    s: &StateVector,
    mask: &[bool],
    net: &Mlp<f32>,
    ex: &Exploration,
    rng: &mut R,
) -> Result<usize, TrainError> {
    let valid: Vec<usize> = (0..mask.len()).filter(|&k| mask[k]).collect();
    if valid.is_empty() {
        return Err(TrainError::NoValidAction);
    }
    let u: f64 = rng.gen();
    if u < ex.eps_r {
        return Ok(valid[rng.gen_range(0..valid.len())]);
    }
    let greedy = greedy_action(s, mask, net)?;
    if ex.grid_shift && u < ex.eps_r + ex.eps_s {
        let g = s
            .grid_size()
            .ok_or_else(|| TrainError::Config("state length does not match any grid".into()))?;
        let shifts = grid_shift_candidates(g, greedy, mask);
        if !shifts.is_empty() {
            return Ok(shifts[rng.gen_range(0..shifts.len())]);
        }
    }
    Ok(greedy)
}

/// Best partitions seen so far and their cost report.
#[derive(Debug, Clone, PartialEq)]
pub struct BestTracker {
    pub partitions: PartitionSet,
    pub report: CostReport,
    /// Frequency-weighted cost of `report`.
    pub weighted: f64,
    pub updates: usize,
}

impl BestTracker {
    pub fn new(partitions: PartitionSet, report: CostReport, w: &Workload) -> Result<Self, TrainError> {
        let weighted = report
            .weighted_cost(w)
            .ok_or_else(|| TrainError::Config("initial best report is pruned".into()))?;
        Ok(BestTracker {
            partitions,
            report,
            weighted,
            updates: 0,
        })
    }

    /// Replaces the best set when `reward > 1` and the weighted cost also
    /// drops. Returns whether it did.
    pub fn offer(&mut self, ps: &PartitionSet, report: &CostReport, reward: f64, w: &Workload) -> bool {
        if report.pruned || reward <= 1.0 {
            return false;
        }
        match report.weighted_cost(w) {
            Some(c) if c < self.weighted => {
                self.partitions = ps.clone();
                self.report = report.clone();
                self.weighted = c;
                self.updates += 1;
                true
            }
            _ => false,
        }
    }
}

/// Transitions for a demo episode, with reward 1 on the final step.
pub fn demo_transitions(env: &PartitionEnv, demo: &DemoEpisode, nstep: &NStepBuilder) -> Result<Vec<Transition>, TrainError> {
    if demo.actions.len() != env.horizon() {
        return Err(TrainError::Config(format!(
            "demo has {} actions, episodes with m = {} take {}",
            demo.actions.len(),
            env.m(),
            env.horizon()
        )));
    }
    let g = env.g();
    let mut st = env.reset();
    let mut steps = Vec::with_capacity(demo.actions.len());
    for a in &demo.actions {
        let state = Arc::new(env.encode(&st));
        let done = env.step(&mut st, a)?;
        steps.push(EpisodeStep {
            state,
            action: crate::env::action_index(g, a),
            reward: if done { 1.0 } else { 0.0 },
        });
    }
    let last = Arc::new(env.encode(&st));
    Ok(nstep.build(&steps, &last, true))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub reward: f64,
    /// `None` when the evaluation was pruned.
    pub weighted_cost: Option<f64>,
    pub pruned: bool,
    /// Losses averaged over the episode's training steps.
    pub l_n: f64,
    pub l_c: f64,
    pub l_l2: f64,
    pub best_cost: f64,
    pub actions: Vec<usize>,
}

pub const LOG_HEADER: &str = "episode,reward,weighted_cost,pruned,l_n,l_c,l_l2,best_cost,actions";

impl EpisodeLog {
    pub fn csv_row(&self) -> String {
        let actions: Vec<String> = self.actions.iter().map(|a| a.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.episode,
            self.reward,
            self.weighted_cost.map(|c| c.to_string()).unwrap_or_default(),
            self.pruned,
            self.l_n,
            self.l_c,
            self.l_l2,
            self.best_cost,
            actions.join(" ")
        )
    }
}

pub fn log_to_csv(log: &[EpisodeLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for e in log {
        out.push_str(&e.csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_log_csv(text: &str) -> Result<Vec<EpisodeLog>, TrainError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOG_HEADER) {
        return Err(TrainError::Config("training log has an unexpected header".into()));
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let err = || TrainError::Config(format!("training log line {}: {line:?}", k + 2));
        if f.len() != 9 {
            return Err(err());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err());
        out.push(EpisodeLog {
            episode: f[0].parse().map_err(|_| err())?,
            reward: num(f[1])?,
            weighted_cost: if f[2].is_empty() { None } else { Some(num(f[2])?) },
            pruned: f[3].parse().map_err(|_| err())?,
            l_n: num(f[4])?,
            l_c: num(f[5])?,
            l_l2: num(f[6])?,
            best_cost: num(f[7])?,
            actions: f[8]
                .split_whitespace()
                .map(|a| a.parse().map_err(|_| err()))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PretrainOutcome {
    /// The greedy rollout reproduced the demo partitions.
    pub converged: bool,
    pub episodes: usize,
}

#[derive(Default)]
struct LossSums {
    l_n: f64,
    l_c: f64,
    l_l2: f64,
    count: usize,
}

impl LossSums {
    fn add(&mut self, l: &LossBreakdown) {
        self.l_n += l.l_n;
        self.l_c += l.l_c;
        self.l_l2 += l.l_l2;
        self.count += 1;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let n = self.count.max(1) as f64;
        (self.l_n / n, self.l_c / n, self.l_l2 / n)
    }
}

/// Owns the networks, memories and RNG for one training run.
///
/// All randomness comes from a single seeded stream, consumed in this order
/// per environment step: action selection, then mini-batch draws.
pub struct Trainer<'o> {
    cfg: TrainConfig,
    env: PartitionEnv,
    oracle: &'o dyn CostOracle,
    workload: Workload,
    demo: DemoEpisode,
    demo_report: CostReport,
    main: Mlp<f32>,
    target: Mlp<f32>,
    adam: AdamState<f32>,
    demo_mem: PrioritizedMemory,
    agent_mem: PrioritizedMemory,
    beta: BetaSchedule,
    rng: ChaCha8Rng,
    train_steps: u64,
    best: BestTracker,
    full_evaluations: usize,
    log: Vec<EpisodeLog>,
}

impl<'o> Trainer<'o> {
    pub fn new(
        cfg: TrainConfig,
        env: PartitionEnv,
        oracle: &'o dyn CostOracle,
        workload: Workload,
        demo: DemoEpisode,
    ) -> Result<Self, TrainError> {
        let transitions = demo_transitions(&env, &demo, &cfg.nstep())?;
        Self::with_demo_transitions(cfg, env, oracle, workload, demo, transitions)
    }

    pub fn with_demo_transitions(
        cfg: TrainConfig,
        env: PartitionEnv,
        oracle: &'o dyn CostOracle,
        workload: Workload,
        demo: DemoEpisode,
        transitions: Vec<Transition>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if env.g() != cfg.g || env.m() != cfg.m {
            return Err(TrainError::Config(format!(
                "environment is g={} m={}, config says g={} m={}",
                env.g(),
                env.m(),
                cfg.g,
                cfg.m
            )));
        }
        if demo.final_partitions.grid() != env.grid() || demo.final_partitions.len() != cfg.m {
            return Err(TrainError::Config(
                "demo partitions do not match the environment's grid and m".into(),
            ));
        }
        if transitions.is_empty() {
            return Err(TrainError::Config("no demo transitions".into()));
        }
        let demo_report = evaluate_workload(oracle, &demo.final_partitions, &workload)?;
        let best = BestTracker::new(demo.final_partitions.clone(), demo_report.clone(), &workload)?;
        let main = Mlp::q_network(cfg.g, cfg.hidden, cfg.seed);
        let target = main.clone();
        let adam = AdamState::new(&main, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        let mut demo_mem = PrioritizedMemory::unbounded(cfg.demo_capacity, cfg.per());
        for t in transitions {
            demo_mem.push(t);
        }
        let agent_mem = PrioritizedMemory::bounded(cfg.agent_capacity, cfg.per());
        let pre = if cfg.pretrain { cfg.pretrain_episodes } else { 0 };
        let beta = BetaSchedule {
            start: cfg.beta_start,
            end: cfg.beta_end,
            steps: (pre + cfg.episodes * env.horizon()) as u64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            cfg,
            env,
            oracle,
            workload,
            demo,
            demo_report,
            main,
            target,
            adam,
            demo_mem,
            agent_mem,
            beta,
            rng,
            train_steps: 0,
            best,
            full_evaluations: 0,
            log: Vec::new(),
        })
    }

    /// Starts from existing network weights and optimizer state.
    pub fn with_network(mut self, main: Mlp<f32>, adam: AdamState<f32>) -> Result<Self, TrainError> {
        let want = q_network_dims(self.cfg.g, self.cfg.hidden);
        if main.dims() != want {
            return Err(TrainError::Config(format!(
                "network dims {:?} do not match the configuration's {want:?}",
                main.dims()
            )));
        }
        self.target = main.clone();
        self.main = main;
        self.adam = adam;
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn env(&self) -> &PartitionEnv {
        &self.env
    }

    pub fn main_net(&self) -> &Mlp<f32> {
        &self.main
    }

    pub fn target_net(&self) -> &Mlp<f32> {
        &self.target
    }

    pub fn adam(&self) -> &AdamState<f32> {
        &self.adam
    }

    pub fn demo(&self) -> &DemoEpisode {
        &self.demo
    }

    pub fn demo_report(&self) -> &CostReport {
        &self.demo_report
    }

    pub fn demo_cost(&self) -> f64 {
        self.demo_report.weighted_cost(&self.workload).expect("demo report is complete")
    }

    pub fn best(&self) -> &BestTracker {
        &self.best
    }

    pub fn demo_memory(&self) -> &PrioritizedMemory {
        &self.demo_mem
    }

    pub fn agent_memory(&self) -> &PrioritizedMemory {
        &self.agent_mem
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    /// Episodes whose workload evaluation ran to completion.
    pub fn full_evaluations(&self) -> usize {
        self.full_evaluations
    }

    pub fn log(&self) -> &[EpisodeLog] {
        &self.log
    }

    /// One mini-batch update of the main network.
    pub fn train_step(&mut self) -> Result<LossBreakdown, TrainError> {
        let beta = self.beta.at(self.train_steps);
        let batch = sample_mixed(
            &self.demo_mem,
            &self.agent_mem,
            self.cfg.batch,
            self.cfg.rho,
            beta,
            &mut self.rng,
        )?;
        let (loss, grads) = compute_losses(
            &batch.transitions,
            &batch.weights,
            &self.main,
            &self.target,
            &self.cfg.loss(),
        )?;
        self.adam.step(&mut self.main, &grads)?;
        for (r, td) in batch.refs.iter().zip(&loss.td_errors) {
            let mem = match r.source {
                Source::Demo => &mut self.demo_mem,
                Source::Agent => &mut self.agent_mem,
            };
            mem.update_priorities(&[r.slot], &[*td])?;
        }
        self.train_steps += 1;
        if self.train_steps.is_multiple_of(self.cfg.target_sync as u64) {
            sync_target(&self.main, &mut self.target)?;
        }
        Ok(loss)
    }

    /// Partitions produced by acting greedily from the initial state.
    pub fn greedy_rollout(&self) -> Result<PartitionSet, TrainError> {
        let mut st = self.env.reset();
        loop {
            let s = self.env.encode(&st);
            let mask = mask_from_state(&s, self.env.g());
            let a = greedy_action(&s, &mask, &self.main)?;
            if self.env.step(&mut st, &index_action(self.env.g(), a))? {
                return Ok(st.ps);
            }
        }
    }

    /// Trains on demo transitions only until the greedy rollout reproduces
    /// the demo partitions or the episode budget runs out.
    pub fn pretrain(&mut self) -> Result<PretrainOutcome, TrainError> {
        sync_target(&self.main, &mut self.target)?;
        for e in 1..=self.cfg.pretrain_episodes {
            self.train_step()?;
            if (e == 1 || e % self.cfg.pretrain_check == 0) && self.greedy_rollout()? == self.demo.final_partitions {
                return Ok(PretrainOutcome {
                    converged: true,
                    episodes: e,
                });
            }
        }
        Ok(PretrainOutcome {
            converged: false,
            episodes: self.cfg.pretrain_episodes,
        })
    }

    /// Plays one episode, training after every step. With `script`, the
    /// given action indices are played instead of exploring.
    pub fn run_episode(&mut self, script: Option<&[usize]>) -> Result<EpisodeLog, TrainError> {
        let episode = self.log.len() + 1;
        let g = self.env.g();
        if let Some(s) = script {
            if s.len() != self.env.horizon() {
                return Err(TrainError::Script {
                    episode,
                    msg: format!("{} actions, episodes take {}", s.len(), self.env.horizon()),
                });
            }
        }
        let mut st = self.env.reset();
        let mut steps = Vec::with_capacity(self.env.horizon());
        let mut losses = LossSums::default();
        loop {
            let s = Arc::new(self.env.encode(&st));
            let mask = mask_from_state(&s, g);
            let a = match script {
                Some(actions) => {
                    let a = actions[steps.len()];
                    if !mask.get(a).copied().unwrap_or(false) {
                        return Err(TrainError::Script {
                            episode,
                            msg: format!("action {a} is invalid at step {}", steps.len()),
                        });
                    }
                    a
                }
                None => select_action(&s, &mask, &self.main, &self.cfg.exploration(), &mut self.rng)?,
            };
            let done = self.env.step(&mut st, &index_action(g, a))?;
            steps.push(EpisodeStep {
                state: s,
                action: a,
                reward: 0.0,
            });
            losses.add(&self.train_step()?);
            if done {
                break;
            }
        }

        let report = if self.cfg.prune {
            evaluate_workload_pruned(
                self.oracle,
                &st.ps,
                &self.workload,
                &self.best.report,
                self.cfg.cost.prune_factor,
            )?
        } else {
            evaluate_workload(self.oracle, &st.ps, &self.workload)?
        };
        let reward = if report.pruned {
            self.cfg.cost.prune_reward
        } else {
            self.full_evaluations += 1;
            compute_reward(&self.best.report, &report, &self.workload)?
        };
        steps.last_mut().expect("episodes have at least one step").reward = reward;
        let improved = self.best.offer(&st.ps, &report, reward, &self.workload);

        let last = Arc::new(self.env.encode(&st));
        let mem = if improved { &mut self.demo_mem } else { &mut self.agent_mem };
        for t in self.cfg.nstep().build(&steps, &last, improved) {
            mem.push(t);
        }

        let (l_n, l_c, l_l2) = losses.mean();
        let entry = EpisodeLog {
            episode,
            reward,
            weighted_cost: report.weighted_cost(&self.workload),
            pruned: report.pruned,
            l_n,
            l_c,
            l_l2,
            best_cost: self.best.weighted,
            actions: steps.iter().map(|s| s.action).collect(),
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn main_train(&mut self) -> Result<(), TrainError> {
        self.main_train_with(|_, _| Ok(()))
    }

    /// Runs the configured number of episodes, calling `after` at the end
    /// of each one.
    pub fn main_train_with<F>(&mut self, mut after: F) -> Result<(), TrainError>
    where
        F: FnMut(&Self, &EpisodeLog) -> Result<(), TrainError>,
    {
        for _ in 0..self.cfg.episodes {
            let entry = self.run_episode(None)?;
            after(self, &entry)?;
        }
        Ok(())
    }

    /// Replays recorded action sequences, one episode each.
    pub fn run_script(&mut self, episodes: &[Vec<usize>]) -> Result<(), TrainError> {
        for actions in episodes {
            self.run_episode(Some(actions))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Best,
    Second,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub per_query: Vec<f64>,
    pub weighted: f64,
}

/// Per-query and weighted workload cost of each method.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub epsilons: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Column `c` is a query index; `c == epsilons.len()` is the weighted
    /// total.
    pub fn column(&self, c: usize) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| if c < r.per_query.len() { r.per_query[c] } else { r.weighted })
            .collect()
    }

    /// Rows holding the lowest value are best, rows holding the next
    /// distinct value are second.
    pub fn marks(&self, c: usize) -> Vec<Mark> {
        let col = self.column(c);
        let mut distinct = col.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        col.iter()
            .map(|v| {
                if Some(v) == distinct.first() {
                    Mark::Best
                } else if Some(v) == distinct.get(1) {
                    Mark::Second
                } else {
                    Mark::None
                }
            })
            .collect()
    }

    fn headers(&self) -> Vec<String> {
        let mut h: Vec<String> = self.epsilons.iter().map(|e| format!("eps={e}")).collect();
        h.push("weighted".into());
        h
    }

    /// Aligned text; `*` marks the best value per column, `+` the second.
    pub fn to_text(&self) -> String {
        let headers = self.headers();
        let ncols = headers.len();
        let marks: Vec<Vec<Mark>> = (0..ncols).map(|c| self.marks(c)).collect();
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                (0..ncols)
                    .map(|c| {
                        let v = if c < row.per_query.len() { row.per_query[c] } else { row.weighted };
                        let m = match marks[c][r] {
                            Mark::Best => "*",
                            Mark::Second => "+",
                            Mark::None => " ",
                        };
                        format!("{v:.1}{m}")
                    })
                    .collect()
            })
            .collect();
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
        let widths: Vec<usize> = (0..ncols)
            .map(|c| cells.iter().map(|r| r[c].len()).chain([headers[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = format!("{:<name_w$}", "method");
        for (h, w) in headers.iter().zip(&widths) {
            let _ = write!(out, "  {h:>w$}");
        }
        out.push('\n');
        for (row, cells) in self.rows.iter().zip(&cells) {
            let _ = write!(out, "{:<name_w$}", row.name);
            for (cell, w) in cells.iter().zip(&widths) {
                let _ = write!(out, "  {cell:>w$}");
            }
            out.push('\n');
        }
        out.push_str("* best, + second best\n");
        out
    }

    /// Numeric CSV with a `mark` column listing, per row, `best`/`second`
    /// per column separated by spaces.
    pub fn to_csv(&self) -> String {
        let headers = self.headers();
        let marks: Vec<Vec<Mark>> = (0..headers.len()).map(|c| self.marks(c)).collect();
        let mut out = format!("method,{},marks\n", headers.join(","));
        for (r, row) in self.rows.iter().enumerate() {
            let vals: Vec<String> = row
                .per_query
                .iter()
                .chain([&row.weighted])
                .map(|v| v.to_string())
                .collect();
            let row_marks: Vec<&str> = marks
                .iter()
                .map(|m| match m[r] {
                    Mark::Best => "best",
                    Mark::Second => "second",
                    Mark::None => "-",
                })
                .collect();
            let _ = writeln!(out, "{},{},{}", row.name, vals.join(","), row_marks.join(" "));
        }
        out
    }
}

/// Costs the three baselines plus the demo and learned partitions.
pub fn evaluate_all(
    oracle: &dyn CostOracle,
    hist: &CellHistogram,
    grid: &GridSpec,
    w: &Workload,
    demo: &PartitionSet,
    learned: &PartitionSet,
) -> Result<ComparisonTable, TrainError> {
    let m = learned.len();
    let mut sets: Vec<(String, PartitionSet)> = Vec::with_capacity(5);
    for method in Method::ALL {
        let ep = baselines::run(method, hist, grid, m)?;
        sets.push((method.label().to_string(), ep.final_partitions));
    }
    sets.push(("Demo".into(), demo.clone()));
    sets.push(("Learned".into(), learned.clone()));
    let rows = sets
        .into_iter()
        .map(|(name, ps)| {
            let report = evaluate_workload(oracle, &ps, w)?;
            let weighted = report.weighted_cost(w).expect("full evaluation");
            Ok(ComparisonRow {
                name,
                per_query: report.per_query,
                weighted,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(ComparisonTable {
        epsilons: w.queries().iter().map(|q| q.epsilon).collect(),
        frequencies: w.queries().iter().map(|q| q.frequency).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::JoinCostModel;
    use crate::data::{build_histogram, gen_synthetic, BBox, Dataset, MixtureComponent, MixtureParams, SyntheticKind};
    use crate::partition::CutAction;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn state_for(ps: &PartitionSet) -> StateVector {
        let g = ps.g();
        let hist = CellHistogram::from_counts(g, vec![1; g * g]).unwrap();
        crate::env::encode_state(ps, &hist)
    }

    fn constant_net(g: usize, hidden: [usize; 2], bias: impl Fn(usize) -> f64) -> Mlp<f64> {
        let mut net = Mlp::<f64>::zeros(&q_network_dims(g, hidden));
        let last = net.layers().len() - 1;
        for (k, b) in net.layers_mut()[last].bias.iter_mut().enumerate() {
            *b = bias(k);
        }
        net
    }

    fn transition(s: &StateVector, action: usize, ret: f64, next: &StateVector, steps: usize, terminal: bool, demo: bool) -> Transition {
        Transition {
            s: Arc::new(s.clone()),
            action,
            ret,
            s_next: Arc::new(next.clone()),
            steps,
            terminal,
            is_demo: demo,
        }
    }

    fn grid(g: usize) -> GridSpec {
        GridSpec::new(BBox::unit(), g).unwrap()
    }

    #[test]
    fn zero_residual_gives_zero_td_loss() {
        let g = 3;
        let net = constant_net(g, [4, 4], |_| 1.0);
        let s0 = state_for(&PartitionSet::init_single(grid(g)));
        let a = crate::env::action_index(g, &CutAction::down(0, 1));
        let t = transition(&s0, a, 0.5, &s0, 1, false, false);
        let cfg = LossConfig {
            gamma: 0.5,
            ..LossConfig::default()
        };
        let (l, _) = compute_losses(&[t], &[1.0], &net, &net, &cfg).unwrap();
        assert_eq!(l.l_n, 0.0);
        assert_eq!(l.td_errors, vec![0.0]);
        assert_eq!(l.l_c, 0.0);
    }

    #[test]
    fn margin_loss_substitution() {
        let (l, a) = large_margin_loss(&[0.5, 0.9], &[true, true], 0, 0.8).unwrap();
        assert!((l - 1.2).abs() < 1e-12);
        assert_eq!(a, 1);
        // demo action beats every other by at least the margin
        let (l, a) = large_margin_loss(&[2.0, 1.0, 1.2], &[true, true, true], 0, 0.8).unwrap();
        assert_eq!((l, a), (0.0, 0));
    }

    #[test]
    fn imitation_loss_only_on_demo_samples() {
        let g = 3;
        let net = constant_net(g, [4, 4], |k| k as f64 * 0.1);
        let s0 = state_for(&PartitionSet::init_single(grid(g)));
        let a = crate::env::action_index(g, &CutAction::down(0, 1));
        let cfg = LossConfig::default();
        let t = transition(&s0, a, 1.0, &s0, 1, true, false);
        let (l, _) = compute_losses(std::slice::from_ref(&t), &[1.0], &net, &net, &cfg).unwrap();
        assert_eq!(l.l_c, 0.0);
        let demo = Transition { is_demo: true, ..t };
        let (l, _) = compute_losses(&[demo], &[1.0], &net, &net, &cfg).unwrap();
        assert!(l.l_c > 0.0);
    }

    #[test]
    fn terminal_target_has_no_bootstrap() {
        let g = 3;
        let net = constant_net(g, [4, 4], |_| 0.25);
        let s0 = state_for(&PartitionSet::init_single(grid(g)));
        let a = crate::env::action_index(g, &CutAction::down(0, 1));
        let t = transition(&s0, a, 1.0, &s0, 3, true, false);
        let (l, _) = compute_losses(&[t], &[1.0], &net, &net, &LossConfig::default()).unwrap();
        assert_eq!(l.td_errors, vec![0.75]);
        assert!(compute_losses::<f64>(&[], &[], &net, &net, &LossConfig::default()).is_err());
    }

    #[test]
    fn bootstrap_uses_valid_max_only() {
        let g = 3;
        // the invalid action 0 (right at the top-left corner) gets the largest value
        let net = constant_net(g, [4, 4], |k| if k == 0 { 100.0 } else { k as f64 });
        let s0 = state_for(&PartitionSet::init_single(grid(g)));
        let mask = mask_from_state(&s0, g);
        assert!(!mask[0]);
        let best_valid = (0..mask.len()).filter(|&k| mask[k]).max().unwrap();
        let a = 1;
        let cfg = LossConfig {
            gamma: 0.5,
            ..LossConfig::default()
        };
        let t = transition(&s0, a, 0.0, &s0, 1, false, false);
        let (l, _) = compute_losses(&[t], &[1.0], &net, &net, &cfg).unwrap();
        assert_eq!(l.td_errors[0], 0.5 * best_valid as f64 - 1.0);
    }

    fn random_batch(g: usize, seed: u64) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hist = CellHistogram::from_counts(g, (0..g * g).map(|_| rng.gen_range(0..20)).collect()).unwrap();
        let mut out = Vec::new();
        for k in 0..6 {
            let mut ps = PartitionSet::init_single(grid(g));
            for _ in 0..k % 3 {
                let acts = ps.enumerate_valid_actions();
                ps.apply_cut_mut(&acts[rng.gen_range(0..acts.len())]).unwrap();
            }
            let s = crate::env::encode_state(&ps, &hist);
            let acts = ps.enumerate_valid_actions();
            let a = acts[rng.gen_range(0..acts.len())];
            let mut next = ps.clone();
            next.apply_cut_mut(&a).unwrap();
            let sn = crate::env::encode_state(&next, &hist);
            out.push(transition(
                &s,
                crate::env::action_index(g, &a),
                rng.gen_range(0.0..2.0),
                &sn,
                1 + k % 3,
                k % 2 == 0,
                k % 3 == 1,
            ));
        }
        out
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let g = 3;
        let dims = q_network_dims(g, [6, 5]);
        let main = Mlp::<f64>::new(&dims, 11);
        let target = Mlp::<f64>::new(&dims, 12);
        let batch = random_batch(g, 5);
        let weights = [1.0, 0.5, 0.8, 0.3, 1.0, 0.9];
        let cfg = LossConfig {
            lambda3: 0.01,
            ..LossConfig::default()
        };
        let (_, grads) = compute_losses(&batch, &weights, &main, &target, &cfg).unwrap();
        let total = |net: &Mlp<f64>| compute_losses(&batch, &weights, net, &target, &cfg).unwrap().0.total;
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..main.layers().len() {
            let (rows, cols) = main.layers()[k].weight.dim();
            for r in 0..rows {
                for c in (0..cols).step_by(7) {
                    let mut p = main.clone();
                    p.layers_mut()[k].weight[[r, c]] += h;
                    let mut m = main.clone();
                    m.layers_mut()[k].weight[[r, c]] -= h;
                    let numeric = (total(&p) - total(&m)) / (2.0 * h);
                    let a = grads.layers[k].weight[[r, c]];
                    worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
                }
                let mut p = main.clone();
                p.layers_mut()[k].bias[r] += h;
                let mut m = main.clone();
                m.layers_mut()[k].bias[r] -= h;
                let numeric = (total(&p) - total(&m)) / (2.0 * h);
                let a = grads.layers[k].bias[r];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn doubling_lambda3_doubles_l2_term() {
        let g = 3;
        let dims = q_network_dims(g, [6, 5]);
        let main = Mlp::<f64>::new(&dims, 1);
        let batch = random_batch(g, 2);
        let w = vec![1.0; batch.len()];
        let base = LossConfig::default();
        let twice = LossConfig {
            lambda3: 2.0 * base.lambda3,
            ..base
        };
        let (a, _) = compute_losses(&batch, &w, &main, &main, &base).unwrap();
        let (b, _) = compute_losses(&batch, &w, &main, &main, &twice).unwrap();
        let rest = base.lambda1 * a.l_n + base.lambda2 * a.l_c;
        assert_eq!(b.total - rest, 2.0 * (a.total - rest));
        assert_eq!(a.total, base.lambda1 * a.l_n + base.lambda2 * a.l_c + base.lambda3 * a.l_l2);
    }

    #[test]
    fn greedy_when_no_exploration() {
        let g = 4;
        let net = Mlp::q_network(g, [8, 8], 3);
        let s = state_for(&PartitionSet::init_single(grid(g)));
        let mask = mask_from_state(&s, g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = select_action(&s, &mask, &net, &Exploration::greedy(), &mut rng).unwrap();
        for _ in 0..20 {
            assert_eq!(select_action(&s, &mask, &net, &Exploration::greedy(), &mut rng).unwrap(), first);
        }
        let q = q_row(&s, &net).unwrap();
        let scaled: Vec<f64> = q.iter().map(|v| v * 3.5).collect();
        assert_eq!(masked_argmax(scaled, &mask), Some(first));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(masked_argmax([1.0, 3.0, 3.0, 0.0], &[true; 4]), Some(1));
        assert_eq!(masked_argmax([1.0, 3.0, 3.0, 0.0], &[true, false, true, true]), Some(2));
        assert_eq!(masked_argmax([1.0], &[false]), None);
    }

    #[test]
    fn grid_shift_is_uniform_over_four_neighbours() {
        let g = 10;
        let mut ps = PartitionSet::init_single(grid(g));
        for i in [4, 5, 6] {
            ps.apply_cut_mut(&CutAction::right(i, 0)).unwrap();
        }
        let s = state_for(&ps);
        let mask = mask_from_state(&s, g);
        let greedy = crate::env::action_index(g, &CutAction::down(5, 5));
        let net = constant_net(g, [4, 4], |k| if k == greedy { 1.0 } else { 0.0 }).cast::<f32>();
        let shifts = grid_shift_candidates(g, greedy, &mask);
        assert_eq!(shifts.len(), 4);
        let ex = Exploration {
            eps_r: 0.0,
            eps_s: 1.0,
            grid_shift: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0f64; 4];
        let trials = 10_000;
        for _ in 0..trials {
            let a = select_action(&s, &mask, &net, &ex, &mut rng).unwrap();
            counts[shifts.iter().position(|&k| k == a).unwrap()] += 1.0;
        }
        let expected = trials as f64 / 4.0;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 = {stat}, p = {p}");

        let off = Exploration { grid_shift: false, ..ex };
        assert_eq!(select_action(&s, &mask, &net, &off, &mut rng).unwrap(), greedy);
    }

    #[test]
    fn selection_never_invalid() {
        let g = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ex = Exploration {
            eps_r: 0.1,
            eps_s: 0.2,
            grid_shift: true,
        };
        let hist = CellHistogram::from_counts(g, (1..=16).collect()).unwrap();
        for trial in 0..100_000u64 {
            let net_seed = trial % 50;
            let mut ps = PartitionSet::init_single(grid(g));
            for _ in 0..rng.gen_range(0..6) {
                let acts = ps.enumerate_valid_actions();
                if acts.is_empty() {
                    break;
                }
                ps.apply_cut_mut(&acts[rng.gen_range(0..acts.len())]).unwrap();
            }
            let s = crate::env::encode_state(&ps, &hist);
            let mask = mask_from_state(&s, g);
            if !mask.iter().any(|b| *b) {
                continue;
            }
            let net = Mlp::q_network(g, [4, 4], net_seed);
            let a = select_action(&s, &mask, &net, &ex, &mut rng).unwrap();
            assert!(ps.is_valid_cut(&index_action(g, a)));
        }
    }

    fn skewed(n: usize, seed: u64) -> Dataset {
        let params = MixtureParams {
            bbox: BBox::unit(),
            components: vec![
                MixtureComponent {
                    center: (0.2, 0.25),
                    std: 0.05,
                    weight: 0.8,
                },
                MixtureComponent {
                    center: (0.75, 0.7),
                    std: 0.1,
                    weight: 0.2,
                },
            ],
        };
        gen_synthetic(SyntheticKind::GaussianMixture, n, seed, &params).unwrap()
    }

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            g: 5,
            m: 3,
            episodes: 12,
            pretrain_episodes: 30,
            hidden: [16, 16],
            batch: 8,
            target_sync: 5,
            seed,
            ..TrainConfig::default()
        }
    }

    fn setup(cfg: &TrainConfig, data: &Dataset) -> (PartitionEnv, DemoEpisode, Workload) {
        let grid = GridSpec::new(BBox::unit(), cfg.g).unwrap();
        let hist = Arc::new(build_histogram(data, &grid).unwrap());
        let demo = baselines::kdb_actions(&hist, &grid, cfg.m).unwrap();
        let env = PartitionEnv::new(grid, hist, cfg.m).unwrap();
        let w = Workload::new([(0.02, 0.5), (0.05, 0.5)]).unwrap();
        (env, demo, w)
    }

    #[test]
    fn demo_transitions_end_in_unit_reward() {
        let data = skewed(500, 1);
        let cfg = TrainConfig {
            g: 6,
            m: 4,
            ..small_cfg(0)
        };
        let (env, demo, _) = setup(&cfg, &data);
        let ts = demo_transitions(&env, &demo, &cfg.nstep()).unwrap();
        let rets: Vec<f64> = ts.iter().map(|t| t.ret).collect();
        assert_eq!(rets, vec![0.9801, 0.99, 1.0]);
        assert!(ts.iter().all(|t| t.is_demo && t.terminal));
    }

    #[test]
    fn training_is_reproducible_and_never_worse_than_demo() {
        let data = skewed(800, 3);
        let cfg = small_cfg(4);
        let (env, demo, w) = setup(&cfg, &data);
        let oracle = JoinCostModel::new(&data, *env.grid(), cfg.cost);
        let run = || {
            let mut t = Trainer::new(cfg.clone(), env.clone(), &oracle, w.clone(), demo.clone()).unwrap();
            t.pretrain().unwrap();
            t.main_train().unwrap();
            (t.log().to_vec(), t.best().clone(), t.demo_cost())
        };
        let (log_a, best_a, demo_cost) = run();
        let (log_b, best_b, _) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(best_a, best_b);
        assert_eq!(log_a.len(), 12);
        assert!(best_a.weighted <= demo_cost);
        let mut prev = demo_cost;
        for e in &log_a {
            assert!(e.best_cost <= prev);
            prev = e.best_cost;
            assert_eq!(e.pruned, e.weighted_cost.is_none());
            if e.pruned {
                assert_eq!(e.reward, 0.2);
            }
        }
        let back = parse_log_csv(&log_to_csv(&log_a)).unwrap();
        assert_eq!(back, log_a);
    }

    #[test]
    fn replaying_the_demo_is_reward_one_and_goes_to_agent_memory() {
        let data = skewed(800, 3);
        let cfg = small_cfg(1);
        let (env, demo, w) = setup(&cfg, &data);
        let oracle = JoinCostModel::new(&data, *env.grid(), cfg.cost);
        let mut t = Trainer::new(cfg.clone(), env.clone(), &oracle, w, demo.clone()).unwrap();
        let demo_len = t.demo_memory().len();
        let script: Vec<usize> = demo.actions.iter().map(|a| crate::env::action_index(cfg.g, a)).collect();
        let e = t.run_episode(Some(&script)).unwrap();
        assert_eq!(e.reward, 1.0);
        assert!(!e.pruned);
        assert_eq!(t.demo_memory().len(), demo_len);
        assert_eq!(t.agent_memory().len(), cfg.m - 1);
        assert_eq!(t.best().updates, 0);
        assert!(t.run_episode(Some(&script[..1])).is_err());
    }

    #[test]
    fn best_tracker_needs_reward_above_one() {
        let w = Workload::new([(0.1, 1.0)]).unwrap();
        let ps = PartitionSet::init_single(grid(4));
        let rep = |c: f64| CostReport {
            per_query: vec![c],
            pruned: false,
        };
        let mut b = BestTracker::new(ps.clone(), rep(10.0), &w).unwrap();
        assert!(!b.offer(&ps, &rep(10.0), 1.0, &w));
        let pruned = CostReport {
            per_query: vec![30.0],
            pruned: true,
        };
        assert!(!b.offer(&ps, &pruned, 0.2, &w));
        assert!(b.offer(&ps, &rep(5.0), 4.0, &w));
        assert_eq!(b.weighted, 5.0);
    }

    #[test]
    fn kdb_beats_uniform_on_skewed_data() {
        let data = skewed(4000, 8);
        let g = 10;
        let grid = GridSpec::new(BBox::unit(), g).unwrap();
        let hist = build_histogram(&data, &grid).unwrap();
        let w = Workload::new([(0.01, 0.25), (0.02, 0.5), (0.03, 0.25)]).unwrap();
        let oracle = JoinCostModel::new(&data, grid, CostParams::default());
        let demo = baselines::kdb_actions(&hist, &grid, 4).unwrap().final_partitions;
        let table = evaluate_all(&oracle, &hist, &grid, &w, &demo, &demo).unwrap();
        let names: Vec<&str> = table.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["Uniform", "Quad", "KDB", "Demo", "Learned"]);
        assert!(table.row("KDB").unwrap().weighted < table.row("Uniform").unwrap().weighted);
        assert_eq!(table, evaluate_all(&oracle, &hist, &grid, &w, &demo, &demo).unwrap());
        let text = table.to_text();
        assert!(text.contains('*'));
        assert_eq!(table.to_csv().lines().count(), 6);
    }

    #[test]
    fn marks_rank_distinct_values() {
        let t = ComparisonTable {
            epsilons: vec![0.1],
            frequencies: vec![1.0],
            rows: [3.0, 1.0, 2.0, 1.0]
                .iter()
                .enumerate()
                .map(|(k, v)| ComparisonRow {
                    name: k.to_string(),
                    per_query: vec![*v],
                    weighted: *v,
                })
                .collect(),
        };
        assert_eq!(t.marks(0), vec![Mark::None, Mark::Best, Mark::Second, Mark::Best]);
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.set("m", "4").unwrap();
        cfg.set("prune", "false").unwrap();
        cfg.set("c_pair", "0.25").unwrap();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("m", "four").is_err());
        let mut back = TrainConfig::default();
        for (k, v) in crate::cost::parse_key_values(&cfg.to_config_string()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        let bad = TrainConfig {
            eps_r: 0.9,
            eps_s: 0.2,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { m: 1, ..TrainConfig::default() }.validate().is_err());
    }
}
