//! The training loop: `K` local adaptive steps per agent, then one
//! compressed gossip round, repeated for `T` rounds.
//!
//! At iteration `t` (0-based, `TK` iterations in total) every agent draws a
//! stochastic gradient and takes a local step to `x^{t+1/2}`. When
//! `(t + 1) % K == 0` the agents communicate:
//!
//! ```text
//! xu_i <- xu_i + Q[x_i^{t+1/2} - xu_i]
//! x_i  <- x_i^{t+1/2} + gamma (sum_j W_ji xu_j - xu_i)
//! ```
//!
//! where `xu` is each agent's compression reference. Two implementations of
//! the round exist. [`comm_round_direct`] reads neighbours' references
//! directly and serves as the reference. [`comm_round_bookkeeping`] only
//! consumes the compressed deltas: every agent keeps `y_i = sum_j W_ji xu_j`
//! up to date by adding `sum_j W_ji Q_j` each round. Under the same compressor
//! draws both produce the same trajectory.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{compress, eta_of, CompressorSpec, PayloadWidths};
use crate::error::{Error, Result};
use crate::localopt::{OptimizerSpec, OptimizerState};
use crate::problems::{Batch, ProblemSet};
use crate::rng::{stream, Purpose, Stream};
use crate::topology::{build_topology, MixingMatrix, TopologyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommVariant {
    #[default]
    Bookkeeping,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoryMode {
    #[default]
    Off,
    /// Check step-size conditions and log violations.
    Warn,
    /// Check step-size conditions and refuse to run on violation.
    Strict,
}

impl TheoryMode {
    pub fn is_on(&self) -> bool {
        *self != TheoryMode::Off
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub optimizer: OptimizerSpec,
    pub compressor: CompressorSpec,
    pub topology: TopologyKind,
    pub n: usize,
    /// Local steps per round (`K`).
    pub local_steps: usize,
    /// Communication rounds (`T`).
    pub rounds: usize,
    /// Mixing step size; `None` picks [`default_gamma`].
    pub gamma: Option<f64>,
    pub seed: u64,
    pub theory_mode: TheoryMode,
    /// Metric cadence; `None` means every iteration up to 10^4 iterations,
    /// else every `K`.
    pub record_every: Option<usize>,
    pub batch: Batch,
    pub comm: CommVariant,
    /// Threads used for the local phase. Results do not depend on it.
    pub workers: usize,
    /// Keep per-iteration moments and gradients for [`z_sequence_probe`].
    pub record_history: bool,
    pub widths: PayloadWidths,
    /// Shared starting point; zeros when `None`.
    pub x0: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn new(optimizer: OptimizerSpec, topology: TopologyKind, n: usize) -> Self {
        RunConfig {
            optimizer,
            compressor: CompressorSpec::Identity,
            topology,
            n,
            local_steps: 1,
            rounds: 1,
            gamma: None,
            seed: 0,
            theory_mode: TheoryMode::Off,
            record_every: None,
            batch: Batch::Sample(1),
            comm: CommVariant::Bookkeeping,
            workers: 1,
            record_history: false,
            widths: PayloadWidths::default(),
            x0: None,
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.local_steps * self.rounds
    }

    pub fn record_cadence(&self) -> usize {
        self.record_every.unwrap_or(if self.total_iterations() <= 10_000 {
            1
        } else {
            self.local_steps
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.local_steps == 0 {
            return Err(Error::config("local_steps", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config("gamma", format!("must be in [0, 1], got {g}")));
            }
        }
        if self.record_every == Some(0) {
            return Err(Error::config("record_every", "must be at least 1"));
        }
        if self.batch == Batch::Sample(0) {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        Ok(())
    }
}

/// `(1 - rho)(1 - eta^2) / 100`, the largest mixing step the consensus
/// analysis admits.
pub fn gamma_ceiling(rho: f64, eta: f64) -> f64 {
    (1.0 - rho) * (1.0 - eta * eta) / 100.0
}

/// Theory mode uses the ceiling exactly. Otherwise identity compression mixes
/// with `gamma = 1`, and compressed runs with `1 - eta^2`, the fraction of
/// the signal a compressed message is guaranteed to carry.
pub fn default_gamma(theory: TheoryMode, rho: f64, eta: f64) -> f64 {
    if theory.is_on() {
        gamma_ceiling(rho, eta)
    } else {
        1.0 - eta * eta
    }
}

/// One agent's full state.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub x: Vec<f64>,
    /// Compression reference.
    pub x_under: Vec<f64>,
    /// Running `sum_j W_ji x_under_j`, maintained from compressed deltas.
    pub y: Vec<f64>,
    pub opt: OptimizerState,
    pub last_grad: Vec<f64>,
    sampler: Stream,
}

impl AgentState {
    pub fn new(x0: &[f64], opt: OptimizerState, sampler: Stream) -> Self {
        AgentState {
            x: x0.to_vec(),
            x_under: x0.to_vec(),
            y: x0.to_vec(),
            opt,
            last_grad: vec![0.0; x0.len()],
            sampler,
        }
    }
}

/// Per-agent compressor streams for one round. Stream ids are unique per
/// `(round, agent)`.
pub fn round_streams(seed: u64, round: usize, n: usize) -> Vec<Stream> {
    (0..n)
        .map(|i| stream(seed, Purpose::Compression, (round * n + i) as u64))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundTraffic {
    /// Sum over agents of payload times receiving neighbours.
    pub network_bytes: u64,
    /// Sum over agents of one payload each.
    pub broadcast_bytes: u64,
}

/// Compresses every agent's delta once (agent `i` uses `rngs[i]`) and
/// advances the references.
fn compress_deltas<R: Rng>(
    states: &mut [AgentState],
    mixing: &MixingMatrix,
    compressor: &CompressorSpec,
    rngs: &mut [R],
    widths: PayloadWidths,
) -> Result<(Vec<Vec<f64>>, RoundTraffic)> {
    let mut traffic = RoundTraffic::default();
    let mut deltas = Vec::with_capacity(states.len());
    for (i, (s, rng)) in states.iter_mut().zip(rngs.iter_mut()).enumerate() {
        let diff: Vec<f64> = s.x.iter().zip(&s.x_under).map(|(a, b)| a - b).collect();
        let q = compress(compressor, &diff, rng, widths)?;
        for (u, v) in s.x_under.iter_mut().zip(&q.dense) {
            *u += v;
        }
        traffic.broadcast_bytes += q.payload_bytes as u64;
        traffic.network_bytes += (q.payload_bytes * mixing.out_degree(i)) as u64;
        deltas.push(q.dense);
    }
    Ok((deltas, traffic))
}

fn check_round_inputs<R>(states: &[AgentState], mixing: &MixingMatrix, rngs: &[R]) -> Result<()> {
    if states.len() != mixing.n() || rngs.len() != mixing.n() {
        return Err(Error::Dimension {
            expected: mixing.n(),
            got: states.len().min(rngs.len()),
        });
    }
    Ok(())
}

/// Reference communication round. Expects `states[i].x` to hold
/// `x^{t+1/2}`; leaves `x^{t+1}` there. Every reference is updated before
/// any iterate reads them.
pub fn comm_round_direct<R: Rng>(
    states: &mut [AgentState],
    mixing: &MixingMatrix,
    gamma: f64,
    compressor: &CompressorSpec,
    rngs: &mut [R],
    widths: PayloadWidths,
) -> Result<RoundTraffic> {
    check_round_inputs(states, mixing, rngs)?;
    let (_, traffic) = compress_deltas(states, mixing, compressor, rngs, widths)?;
    let refs: Vec<Vec<f64>> = states.iter().map(|s| s.x_under.clone()).collect();
    for (i, s) in states.iter_mut().enumerate() {
        let mut mixed = vec![0.0; s.x.len()];
        for j in mixing.in_neighbors(i) {
            let w = mixing.weight(j, i);
            for (m, v) in mixed.iter_mut().zip(&refs[j]) {
                *m += w * v;
            }
        }
        for ((x, m), u) in s.x.iter_mut().zip(&mixed).zip(&s.x_under) {
            *x += gamma * (m - u);
        }
    }
    Ok(traffic)
}

/// Communication round using only compressed deltas; see the module docs.
pub fn comm_round_bookkeeping<R: Rng>(
    states: &mut [AgentState],
    mixing: &MixingMatrix,
    gamma: f64,
    compressor: &CompressorSpec,
    rngs: &mut [R],
    widths: PayloadWidths,
) -> Result<RoundTraffic> {
    check_round_inputs(states, mixing, rngs)?;
    let (deltas, traffic) = compress_deltas(states, mixing, compressor, rngs, widths)?;
    for (i, s) in states.iter_mut().enumerate() {
        for j in mixing.in_neighbors(i) {
            let w = mixing.weight(j, i);
            for (y, q) in s.y.iter_mut().zip(&deltas[j]) {
                *y += w * q;
            }
        }
        for ((x, y), u) in s.x.iter_mut().zip(&s.y).zip(&s.x_under) {
            *x += gamma * (y - u);
        }
    }
    Ok(traffic)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Iterate index: the row describes `x^t`.
    pub t: usize,
    /// Communication rounds completed before `x^t`.
    pub round: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub consensus_err: f64,
    pub bytes_cumulative: u64,
}

/// Extremes observed over the run, used for the boundedness checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub max_grad_norm: f64,
    pub max_grad_inf: f64,
    pub max_m_norm: f64,
    pub max_m_inf: f64,
    pub max_u_inf: f64,
}

/// Raw per-iteration traces (diagonal optimizers only for moments).
#[derive(Debug, Clone, Default)]
pub struct History {
    /// `x_bar^t` for `t = 0..=TK`.
    pub xbar: Vec<Vec<f64>>,
    /// `m[t][i] = m_i^t`.
    pub m: Vec<Vec<Vec<f64>>>,
    /// `u[t][i] = u_i^t`.
    pub u: Vec<Vec<Vec<f64>>>,
    /// `g[t][i] = g_i^t`.
    pub g: Vec<Vec<Vec<f64>>>,
    /// Bit-level checksum of all `(x_under, y)` after iteration `t`.
    pub reference_checksum: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub rows: Vec<MetricRow>,
    /// `||X_perp^t||_F^2` for every `t = 0..TK-1`.
    pub consensus_sq: Vec<f64>,
    /// Largest `|x_bar after mixing - x_bar before mixing|_inf` over rounds.
    pub max_average_drift: f64,
    pub total_bytes: u64,
    pub broadcast_bytes: u64,
    pub rounds_completed: usize,
    pub iterations: usize,
    pub final_x: Vec<Vec<f64>>,
    pub final_xbar: Vec<f64>,
    /// Per-agent inverse-square-root difference sums.
    pub inv_sqrt_diff: Vec<f64>,
    pub stats: RunStats,
    pub history: Option<History>,
    pub rho: f64,
    pub eta: f64,
    pub gamma: f64,
    pub warnings: Vec<String>,
}

impl RunRecord {
    pub fn final_row(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    /// `(1/n) sum_i` of the per-agent accumulator.
    pub fn inv_sqrt_diff_mean(&self) -> f64 {
        self.inv_sqrt_diff.iter().sum::<f64>() / self.inv_sqrt_diff.len().max(1) as f64
    }

    /// CSV with columns `t,round,loss,grad_norm_sq,consensus_err,bytes_cumulative`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn mean_of(xs: &[Vec<f64>]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mut out = vec![0.0; xs[0].len()];
    for x in xs {
        for (o, v) in out.iter_mut().zip(x) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// `||X - x_bar 1^T||_F^2`.
pub fn consensus_sq(xs: &[Vec<f64>]) -> f64 {
    let mean = mean_of(xs);
    xs.iter()
        .map(|x| x.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn checksum(states: &[AgentState]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for s in states {
        for v in s.x_under.iter().chain(&s.y) {
            h = crate::rng::mix(h ^ v.to_bits());
        }
    }
    h
}

/// Step-size conditions evaluated before a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreRunChecks {
    pub gamma_ceiling: f64,
    pub gamma_ok: bool,
    /// `delta / (48 L sqrt(B_u + delta))` with `B_u = clip^2`; absent without
    /// a clip.
    pub alpha_ceiling: Option<f64>,
    pub alpha_ok: Option<bool>,
    pub beta2_warning: Option<String>,
}

pub fn pre_run_checks(
    config: &RunConfig,
    problem: &ProblemSet,
    rho: f64,
    eta: f64,
    gamma: f64,
) -> PreRunChecks {
    let ceiling = gamma_ceiling(rho, eta);
    let delta = config.optimizer.delta;
    let alpha_ceiling = problem
        .clip()
        .map(|c| delta / (48.0 * problem.smoothness() * (c * c + delta).sqrt()));
    PreRunChecks {
        gamma_ceiling: ceiling,
        gamma_ok: gamma <= ceiling * (1.0 + 1e-12),
        alpha_ceiling,
        alpha_ok: alpha_ceiling.map(|a| config.optimizer.alpha <= a),
        beta2_warning: config
            .optimizer
            .beta2_warning(config.total_iterations() as u64),
    }
}

/// Step-by-step driver. [`run`] is `Simulation::new` followed by
/// [`Simulation::finish`].
pub struct Simulation<'a> {
    config: RunConfig,
    problem: &'a ProblemSet,
    mixing: MixingMatrix,
    agents: Vec<AgentState>,
    pool: Option<rayon::ThreadPool>,
    gamma: f64,
    eta: f64,
    t: usize,
    round: usize,
    cadence: usize,
    record: RunRecord,
}

impl<'a> Simulation<'a> {
    pub fn new(config: RunConfig, problem: &'a ProblemSet) -> Result<Self> {
        config.validate()?;
        if config.n != problem.n_agents() {
            return Err(Error::RunConfig(format!(
                "topology has {} agents, problem has {}",
                config.n,
                problem.n_agents()
            )));
        }
        let d = problem.dim();
        let mixing = build_topology(&config.topology, config.n)?;
        let eta = eta_of(&config.compressor, d)?;
        let gamma = config
            .gamma
            .unwrap_or_else(|| default_gamma(config.theory_mode, mixing.rho(), eta));

        let mut warnings = Vec::new();
        if config.theory_mode.is_on() {
            let checks = pre_run_checks(&config, problem, mixing.rho(), eta, gamma);
            let mut violations = Vec::new();
            if !checks.gamma_ok {
                violations.push(format!(
                    "gamma = {gamma} exceeds (1-rho)(1-eta^2)/100 = {}",
                    checks.gamma_ceiling
                ));
            }
            if checks.alpha_ok == Some(false) {
                violations.push(format!(
                    "alpha = {} exceeds delta/(48 L sqrt(B_u+delta)) = {}",
                    config.optimizer.alpha,
                    checks.alpha_ceiling.unwrap_or(f64::NAN)
                ));
            }
            if checks.alpha_ceiling.is_none() {
                warnings.push("no gradient clip configured; alpha ceiling not checked".to_string());
            }
            if config.theory_mode == TheoryMode::Strict && !violations.is_empty() {
                return Err(Error::Theory(violations.join("; ")));
            }
            warnings.extend(violations);
            // The beta2 floor is advisory even in strict mode.
            warnings.extend(checks.beta2_warning);
        }
        for w in &warnings {
            log::warn!("{w}");
        }

        let x0 = match &config.x0 {
            Some(x) => {
                crate::error::check_dim(d, x.len())?;
                x.clone()
            }
            None => vec![0.0; d],
        };
        let agents = (0..config.n)
            .map(|i| {
                Ok(AgentState::new(
                    &x0,
                    OptimizerState::new(&config.optimizer, d)?,
                    stream(config.seed, Purpose::Sampling, i as u64),
                ))
            })
            .collect::<Result<Vec<_>>>()?;

        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::RunConfig(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };

        let cadence = config.record_cadence();
        let history = config.record_history.then(History::default);
        let record = RunRecord {
            rows: Vec::new(),
            consensus_sq: Vec::with_capacity(config.total_iterations()),
            max_average_drift: 0.0,
            total_bytes: 0,
            broadcast_bytes: 0,
            rounds_completed: 0,
            iterations: 0,
            final_x: Vec::new(),
            final_xbar: Vec::new(),
            inv_sqrt_diff: Vec::new(),
            stats: RunStats::default(),
            history,
            rho: mixing.rho(),
            eta,
            gamma,
            warnings,
        };
        let mut sim = Simulation {
            config,
            problem,
            mixing,
            agents,
            pool,
            gamma,
            eta,
            t: 0,
            round: 0,
            cadence,
            record,
        };
        sim.record_row()?;
        if let Some(h) = sim.record.history.as_mut() {
            h.xbar.push(x0);
        }
        Ok(sim)
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn mixing(&self) -> &MixingMatrix {
        &self.mixing
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Iterations completed.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.config.total_iterations()
    }

    fn xs(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(|a| a.x.clone()).collect()
    }

    fn record_row(&mut self) -> Result<()> {
        let xs = self.xs();
        let xbar = mean_of(&xs);
        let (loss, grad) = self.problem.full_grad_and_loss(&xbar)?;
        self.record.rows.push(MetricRow {
            t: self.t,
            round: self.round,
            loss,
            grad_norm_sq: grad.iter().map(|g| g * g).sum(),
            consensus_err: consensus_sq(&xs) / xs.len() as f64,
            bytes_cumulative: self.record.total_bytes,
        });
        Ok(())
    }

    fn local_phase(&mut self) -> Result<()> {
        let problem = self.problem;
        let spec = self.config.optimizer;
        let batch = self.config.batch;
        let work = |(i, a): (usize, &mut AgentState)| -> Result<()> {
            let g = problem.stochastic_grad(i, &a.x, batch, &mut a.sampler)?;
            a.x = a.opt.step(&spec, &g, &a.x)?;
            a.last_grad = g;
            Ok(())
        };
        match &self.pool {
            Some(pool) => {
                let agents = &mut self.agents;
                pool.install(|| agents.par_iter_mut().enumerate().map(work).collect::<Result<Vec<_>>>())?;
            }
            None => {
                self.agents.iter_mut().enumerate().map(work).collect::<Result<Vec<_>>>()?;
            }
        }
        let stats = &mut self.record.stats;
        for a in &self.agents {
            stats.max_grad_norm = stats.max_grad_norm.max(norm(&a.last_grad));
            stats.max_grad_inf = stats.max_grad_inf.max(inf_norm(&a.last_grad));
            stats.max_m_norm = stats.max_m_norm.max(norm(a.opt.m()));
            stats.max_m_inf = stats.max_m_inf.max(inf_norm(a.opt.m()));
            stats.max_u_inf = stats.max_u_inf.max(a.opt.u().max_abs());
        }
        Ok(())
    }

    /// Executes iteration `t`: local steps, then a round if `(t+1) % K == 0`.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::RunConfig("run already finished".into()));
        }
        self.record.consensus_sq.push(consensus_sq(&self.xs()));
        self.local_phase()?;

        if (self.t + 1).is_multiple_of(self.config.local_steps) {
            let before = mean_of(&self.xs());
            let mut rngs = round_streams(self.config.seed, self.round, self.config.n);
            let round_fn = match self.config.comm {
                CommVariant::Direct => comm_round_direct::<Stream>,
                CommVariant::Bookkeeping => comm_round_bookkeeping::<Stream>,
            };
            let traffic = round_fn(
                &mut self.agents,
                &self.mixing,
                self.gamma,
                &self.config.compressor,
                &mut rngs,
                self.config.widths,
            )?;
            let after = mean_of(&self.xs());
            let drift = before
                .iter()
                .zip(&after)
                .fold(0.0f64, |a, (b, c)| a.max((b - c).abs()));
            self.record.max_average_drift = self.record.max_average_drift.max(drift);
            self.record.total_bytes += traffic.network_bytes;
            self.record.broadcast_bytes += traffic.broadcast_bytes;
            self.round += 1;
        }
        self.t += 1;

        if let Some(h) = self.record.history.as_mut() {
            let xs: Vec<Vec<f64>> = self.agents.iter().map(|a| a.x.clone()).collect();
            h.xbar.push(mean_of(&xs));
            h.m.push(self.agents.iter().map(|a| a.opt.m().to_vec()).collect());
            h.u.push(
                self.agents
                    .iter()
                    .map(|a| a.opt.u().as_diag().map(<[f64]>::to_vec).unwrap_or_default())
                    .collect(),
            );
            h.g.push(self.agents.iter().map(|a| a.last_grad.clone()).collect());
            h.reference_checksum.push(checksum(&self.agents));
        }
        if self.t.is_multiple_of(self.cadence) || self.is_done() {
            self.record_row()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunRecord> {
        while !self.is_done() {
            self.step()?;
        }
        let xs = self.xs();
        self.record.final_xbar = mean_of(&xs);
        self.record.final_x = xs;
        self.record.inv_sqrt_diff = self.agents.iter().map(|a| a.opt.inv_sqrt_diff_sum()).collect();
        self.record.rounds_completed = self.round;
        self.record.iterations = self.t;
        Ok(self.record)
    }
}

/// Runs the whole schedule. Deterministic in `config.seed`, independent of
/// `config.workers`.
pub fn run(config: RunConfig, problem: &ProblemSet) -> Result<RunRecord> {
    Simulation::new(config, problem)?.finish()
}

/// Largest Euclidean residual of the auxiliary-sequence identity
///
/// ```text
/// z^{t+1} - z^t = c (alpha/n) sum_i m_i^{t-1} o ((u_i^{t-2}+delta)^{-1/2} - (u_i^{t-1}+delta)^{-1/2})
///                 - (alpha/n) sum_i g_i^t / sqrt(u_i^{t-1} + delta)
/// ```
///
/// with `z^t = x_bar^t + c (x_bar^t - x_bar^{t-1})`, `c = beta1/(1-beta1)`,
/// `x_bar^{-1} = x_bar^0` and zero moments before the first step.
pub fn z_sequence_probe(history: &History, alpha: f64, beta1: f64, delta: f64) -> Result<f64> {
    let iters = history.g.len();
    if iters == 0 || history.xbar.len() != iters + 1 {
        return Err(Error::Missing("iteration history"));
    }
    if history.u.iter().flatten().any(Vec::is_empty) {
        return Err(Error::Missing("diagonal second moments"));
    }
    let n = history.g[0].len();
    let d = history.xbar[0].len();
    let c = beta1 / (1.0 - beta1);
    let xbar = |t: isize| -> &[f64] { &history.xbar[t.max(0) as usize] };
    let z = |t: isize| -> Vec<f64> {
        xbar(t)
            .iter()
            .zip(xbar(t - 1))
            .map(|(a, b)| a + c * (a - b))
            .collect()
    };
    let zeros = vec![0.0; d];
    let moment = |hist: &Vec<Vec<Vec<f64>>>, t: isize, i: usize| -> Vec<f64> {
        if t < 0 {
            zeros.clone()
        } else {
            hist[t as usize][i].clone()
        }
    };

    let mut worst = 0.0f64;
    for t in 0..iters as isize {
        let lhs: Vec<f64> = z(t + 1).iter().zip(z(t)).map(|(a, b)| a - b).collect();
        let mut rhs = vec![0.0; d];
        for i in 0..n {
            let m_prev = moment(&history.m, t - 1, i);
            let u2 = moment(&history.u, t - 2, i);
            let u1 = moment(&history.u, t - 1, i);
            let g = &history.g[t as usize][i];
            for k in 0..d {
                let p2 = 1.0 / (u2[k] + delta).sqrt();
                let p1 = 1.0 / (u1[k] + delta).sqrt();
                rhs[k] += c * alpha / n as f64 * m_prev[k] * (p2 - p1) - alpha / n as f64 * g[k] * p1;
            }
        }
        let res = lhs
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(res);
    }
    Ok(worst)
}
