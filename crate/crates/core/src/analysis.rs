//! Theoretical constants and post-hoc checks of recorded runs.
//!
//! Bounds are reported as `empirical / bound` ratios. The constants are
//! worst-case, so the only meaningful assertion is `ratio <= 1`.

use serde::Serialize;

use crate::compression::{fixed_payload_bytes, CompressorSpec, PayloadWidths};
use crate::engine::RunRecord;
use crate::error::{Error, Result};
use crate::localopt::OptimizerKind;
use crate::topology::MixingMatrix;

/// `(1/n) ||X (I - J)||_F^2` for the agent iterates `xs` (one vector per
/// agent, i.e. the columns of `X`).
pub fn consensus_error(xs: &[Vec<f64>]) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    crate::engine::consensus_sq(xs) / n as f64
}

/// Where the gradient bounds `B` and `B_inf` came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSource {
    /// Derived from the gradient clip: `B_inf = clip`, `B = sqrt(d) clip`.
    Clip,
    /// Running maxima over observed gradients; not a rigorous bound.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryParams {
    pub rho: f64,
    pub eta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
    pub b: f64,
    pub b_inf: f64,
    pub l: f64,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub t: usize,
    pub bound_source: BoundSource,
}

impl TheoryParams {
    /// `B_u = B_inf^2`.
    pub fn b_u(&self) -> f64 {
        self.b_inf * self.b_inf
    }

    pub fn total_iterations(&self) -> usize {
        self.k * self.t
    }

    /// `1 - rho`.
    pub fn rho_hat(&self) -> f64 {
        1.0 - self.rho
    }

    pub fn gamma_within_ceiling(&self) -> bool {
        self.gamma <= crate::engine::gamma_ceiling(self.rho, self.eta) * (1.0 + 1e-12)
    }

    /// Bounds taken from the clip when one is configured, else from the
    /// run's observed maxima.
    #[allow(clippy::too_many_arguments)]
    pub fn from_run(
        run: &RunRecord,
        optimizer: &crate::localopt::OptimizerSpec,
        clip: Option<f64>,
        l: f64,
        n: usize,
        d: usize,
        k: usize,
        t: usize,
    ) -> Self {
        let (b, b_inf, bound_source) = match clip {
            Some(c) => ((d as f64).sqrt() * c, c, BoundSource::Clip),
            None => (
                run.stats.max_grad_norm,
                run.stats.max_grad_inf,
                BoundSource::Empirical,
            ),
        };
        TheoryParams {
            rho: run.rho,
            eta: run.eta,
            gamma: run.gamma,
            alpha: optimizer.alpha,
            beta1: optimizer.beta1,
            beta2: optimizer.beta2,
            delta: optimizer.delta,
            b,
            b_inf,
            l,
            n,
            d,
            k,
            t,
            bound_source,
        }
    }
}

/// Consensus constant
/// `56/(gamma(1-rho)) (80/(gamma(1-rho)) + 15/(1-eta^2)) B^2 / delta`.
pub fn cbar(gamma: f64, rho: f64, eta: f64, b: f64, delta: f64) -> Result<f64> {
    let gr = gamma * (1.0 - rho);
    if !(gr > 0.0) {
        return Err(Error::Theory(format!("gamma (1 - rho) must be positive, got {gr}")));
    }
    if !(eta < 1.0) {
        return Err(Error::Theory(format!("eta must be below 1, got {eta}")));
    }
    if !(delta > 0.0) {
        return Err(Error::Theory(format!("delta must be positive, got {delta}")));
    }
    Ok(56.0 / gr * (80.0 / gr + 15.0 / (1.0 - eta * eta)) * b * b / delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsensusBoundReport {
    /// `(1/TK) sum_t ||X_perp^t||^2`.
    pub empirical: f64,
    /// `alpha^2 n K^2 Cbar`.
    pub bound: f64,
    pub cbar: f64,
    pub ratio: f64,
    pub holds: bool,
}

pub fn check_consensus_bound(run: &RunRecord, params: &TheoryParams) -> Result<ConsensusBoundReport> {
    let tk = params.total_iterations();
    if tk == 0 || run.consensus_sq.len() < tk {
        return Err(Error::Missing("per-iteration consensus error"));
    }
    let empirical = run.consensus_sq[..tk].iter().sum::<f64>() / tk as f64;
    let c = cbar(params.gamma, params.rho, params.eta, params.b, params.delta)?;
    let k = params.k as f64;
    let bound = params.alpha * params.alpha * params.n as f64 * k * k * c;
    let ratio = if bound > 0.0 {
        empirical / bound
    } else if empirical == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ConsensusBoundReport {
        empirical,
        bound,
        cbar: c,
        ratio,
        holds: empirical <= bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepsizeSchedule {
    /// `4 theta sqrt(n (B_inf^2 + delta)) / sqrt(TK)`.
    pub alpha: f64,
    /// `min{delta / (48 L sqrt(B_inf^2 + delta)), 1}`.
    pub ceiling: f64,
    /// `delta / (48 L sqrt(B_u + delta))` with `B_u = B_inf^2`.
    pub smoothness_ceiling: f64,
    pub feasible: bool,
}

pub fn stepsize_schedule(
    n: usize,
    t: usize,
    k: usize,
    b_inf: f64,
    delta: f64,
    theta: f64,
    l: f64,
) -> StepsizeSchedule {
    let root = (b_inf * b_inf + delta).sqrt();
    let alpha = 4.0 * theta * (n as f64).sqrt() * root / ((t * k) as f64).sqrt();
    let smoothness_ceiling = delta / (48.0 * l * root);
    let ceiling = smoothness_ceiling.min(1.0);
    StepsizeSchedule {
        alpha,
        ceiling,
        smoothness_ceiling,
        feasible: alpha <= ceiling,
    }
}

/// Predicted network bytes: `rounds x sum_i payload x out_degree_i`.
/// `None` when the payload size depends on the draw.
pub fn comm_cost_model(
    rounds: usize,
    compressor: &CompressorSpec,
    d: usize,
    mixing: &MixingMatrix,
    widths: PayloadWidths,
) -> Option<u64> {
    let payload = fixed_payload_bytes(compressor, d, widths)? as u64;
    let fanout: u64 = mixing.out_degrees().iter().map(|&k| k as u64).sum();
    Some(rounds as u64 * payload * fanout)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccumulatorReport {
    /// `sum_t (1/n) sum_i ||(u_i^{t-2}+delta)^{-1/2} - (u_i^{t-1}+delta)^{-1/2}||^2`.
    pub measured: f64,
    /// Applicable ceiling; `0` for the SGD kinds.
    pub ceiling: f64,
    pub passed: bool,
}

/// Ceilings: AMSGrad `d/delta`; Adam and Adam-mini
/// `TK d (1-beta2)^2 B_inf^4 / delta^3`; averaged AdaGrad
/// `2 d B_inf^4 / delta^3`; matrix AdaGrad `2 d^2 B_inf^4 / delta^3`;
/// SGD kinds exactly zero.
pub fn accumulator_ceiling(kind: OptimizerKind, params: &TheoryParams) -> f64 {
    let d = params.d as f64;
    let b4 = params.b_inf.powi(4);
    let d3 = params.delta.powi(3);
    match kind {
        OptimizerKind::VanillaSgd | OptimizerKind::MomentumSgd => 0.0,
        OptimizerKind::Amsgrad => d / params.delta,
        OptimizerKind::Adam | OptimizerKind::AdamMini => {
            params.total_iterations() as f64 * d * (1.0 - params.beta2).powi(2) * b4 / d3
        }
        OptimizerKind::AvgAdagrad => 2.0 * d * b4 / d3,
        OptimizerKind::MatrixAdagrad => 2.0 * d * d * b4 / d3,
    }
}

pub fn accumulator_check(run: &RunRecord, kind: OptimizerKind, params: &TheoryParams) -> Result<AccumulatorReport> {
    if run.inv_sqrt_diff.is_empty() {
        return Err(Error::Missing("inverse-square-root difference accumulator"));
    }
    let measured = run.inv_sqrt_diff_mean();
    let ceiling = accumulator_ceiling(kind, params);
    let passed = if kind.is_sgd() {
        measured == 0.0
    } else {
        measured <= ceiling
    };
    Ok(AccumulatorReport {
        measured,
        ceiling,
        passed,
    })
}

/// Boundedness of the moments: `||m|| <= B`, `||m||_inf <= B_inf`,
/// `||u||_inf <= B_inf^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentBoundsReport {
    pub max_m_norm: f64,
    pub max_m_inf: f64,
    pub max_u_inf: f64,
    pub b: f64,
    pub b_inf: f64,
    pub passed: bool,
}

pub fn moment_bounds_check(run: &RunRecord, params: &TheoryParams) -> MomentBoundsReport {
    let s = run.stats;
    // Relative slack for rounding in the recursions.
    let tol = 1.0 + 1e-12;
    MomentBoundsReport {
        max_m_norm: s.max_m_norm,
        max_m_inf: s.max_m_inf,
        max_u_inf: s.max_u_inf,
        b: params.b,
        b_inf: params.b_inf,
        passed: s.max_m_norm <= params.b * tol
            && s.max_m_inf <= params.b_inf * tol
            && s.max_u_inf <= params.b_u() * tol,
    }
}

/// Everything the run summary carries about the theory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub params: TheoryParams,
    pub gamma_ceiling: f64,
    pub gamma_ok: bool,
    pub cbar: Option<f64>,
    pub consensus_bound: Option<ConsensusBoundReport>,
    pub accumulator: Option<AccumulatorReport>,
    pub moment_bounds: MomentBoundsReport,
    pub alpha_ceiling: f64,
    pub alpha_ok: bool,
    pub beta2_floor: f64,
    pub rigorous: bool,
}

pub fn theory_report(run: &RunRecord, kind: OptimizerKind, params: TheoryParams) -> TheoryReport {
    let alpha_ceiling = params.delta / (48.0 * params.l * (params.b_u() + params.delta).sqrt());
    TheoryReport {
        gamma_ceiling: crate::engine::gamma_ceiling(params.rho, params.eta),
        gamma_ok: params.gamma_within_ceiling(),
        cbar: cbar(params.gamma, params.rho, params.eta, params.b, params.delta).ok(),
        consensus_bound: check_consensus_bound(run, &params).ok(),
        accumulator: accumulator_check(run, kind, &params).ok(),
        moment_bounds: moment_bounds_check(run, &params),
        alpha_ceiling,
        alpha_ok: params.alpha <= alpha_ceiling,
        beta2_floor: crate::localopt::OptimizerSpec::beta2_floor(params.total_iterations() as u64),
        rigorous: params.bound_source == BoundSource::Clip,
        params,
    }
}
