//! Per-agent adaptive local updates.
//!
//! One local step at iteration `t` does, in order:
//!
//! 1. `m^t = beta1 m^{t-1} + (1 - beta1) g^t`
//! 2. `u^t = r_t(g^0, ..., g^t)` (rule selected by [`OptimizerKind`])
//! 3. `x^{t+1/2} = x^t - alpha m^t / sqrt(u^{t-1} + delta)`
//!
//! Note the lag in step 3: the divisor is the second moment from the
//! previous step, not the one computed in step 2. All moments start at zero
//! (`m^{-1} = u^{-1} = u^{-2} = 0`) and there is no bias correction.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

/// Dimension ceiling for the full-matrix preconditioner (one eigendecomposition
/// per step).
pub const MATRIX_ADAGRAD_MAX_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    VanillaSgd,
    MomentumSgd,
    Amsgrad,
    Adam,
    AdamMini,
    AvgAdagrad,
    MatrixAdagrad,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::VanillaSgd => "vanilla_sgd",
            OptimizerKind::MomentumSgd => "momentum_sgd",
            OptimizerKind::Amsgrad => "amsgrad",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamMini => "adam_mini",
            OptimizerKind::AvgAdagrad => "avg_adagrad",
            OptimizerKind::MatrixAdagrad => "matrix_adagrad",
        }
    }

    pub fn uses_beta2(&self) -> bool {
        matches!(
            self,
            OptimizerKind::Amsgrad | OptimizerKind::Adam | OptimizerKind::AdamMini
        )
    }

    /// Kinds whose second moment is identically zero.
    pub fn is_sgd(&self) -> bool {
        matches!(self, OptimizerKind::VanillaSgd | OptimizerKind::MomentumSgd)
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_delta() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub alpha: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, alpha: f64) -> Self {
        OptimizerSpec {
            kind,
            alpha,
            beta1: default_beta1(),
            beta2: default_beta2(),
            delta: default_delta(),
        }
        .normalized()
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.normalized()
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    /// Vanilla SGD has no momentum regardless of what was configured.
    pub fn normalized(mut self) -> Self {
        if self.kind == OptimizerKind::VanillaSgd {
            self.beta1 = 0.0;
        }
        self
    }

    /// Range checks. Errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("optimizer.{field}"), msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", format!("must be in [0, 1), got {}", self.beta1));
        }
        if self.kind.uses_beta2() && !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta2", format!("must be in (0, 1), got {}", self.beta2));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta", format!("must be positive, got {}", self.delta));
        }
        Ok(())
    }

    /// Smallest `beta2` the Adam-family convergence guarantee admits for a run
    /// of `total_iters` local steps: `sqrt(TK) / (sqrt(TK) + 1)`.
    pub fn beta2_floor(total_iters: u64) -> f64 {
        let r = (total_iters as f64).sqrt();
        r / (r + 1.0)
    }

    /// Warning text when an Adam/Adam-mini run uses `beta2` below the floor.
    pub fn beta2_warning(&self, total_iters: u64) -> Option<String> {
        if !matches!(self.kind, OptimizerKind::Adam | OptimizerKind::AdamMini) {
            return None;
        }
        let floor = Self::beta2_floor(total_iters);
        (self.beta2 < floor).then(|| {
            format!(
                "beta2 = {} is below sqrt(TK)/(sqrt(TK)+1) = {:.6} for TK = {}",
                self.beta2, floor, total_iters
            )
        })
    }
}

/// Second moment: a vector for the diagonal rules (Adam-mini stores its
/// scalar broadcast to every coordinate) or a PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Moment {
    Diag(Vec<f64>),
    Matrix(DMatrix<f64>),
}

impl Moment {
    fn zeros(kind: OptimizerKind, d: usize) -> Self {
        if kind == OptimizerKind::MatrixAdagrad {
            Moment::Matrix(DMatrix::zeros(d, d))
        } else {
            Moment::Diag(vec![0.0; d])
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        match self {
            Moment::Diag(v) => v.iter().fold(0.0, |a, b| a.max(b.abs())),
            Moment::Matrix(m) => m.iter().fold(0.0, |a, b| a.max(b.abs())),
        }
    }

    pub fn as_diag(&self) -> Option<&[f64]> {
        match self {
            Moment::Diag(v) => Some(v),
            Moment::Matrix(_) => None,
        }
    }
}

/// `(U + delta I)^{-1/2}` for symmetric positive semidefinite `U`.
pub fn inv_sqrt_psd(u: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(u.clone());
    let scale = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues
            .iter()
            .map(|&l| 1.0 / (l.max(0.0) + delta).sqrt()),
    );
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&scale) * v.transpose()
}

/// Elementwise or matrix preconditioner `(u + delta)^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
enum Precond {
    Diag(Vec<f64>),
    Matrix(DMatrix<f64>),
}

impl Precond {
    fn of(u: &Moment, delta: f64) -> Self {
        match u {
            Moment::Diag(v) => Precond::Diag(v.iter().map(|&x| 1.0 / (x + delta).sqrt()).collect()),
            Moment::Matrix(m) => Precond::Matrix(inv_sqrt_psd(m, delta)),
        }
    }

    fn dist_sq(&self, other: &Precond) -> f64 {
        match (self, other) {
            (Precond::Diag(a), Precond::Diag(b)) => {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
            }
            (Precond::Matrix(a), Precond::Matrix(b)) => (a - b).norm_squared(),
            _ => unreachable!("preconditioner shapes are fixed per kind"),
        }
    }

    fn apply(&self, m: &[f64]) -> Vec<f64> {
        match self {
            Precond::Diag(p) => m.iter().zip(p).map(|(a, b)| a * b).collect(),
            Precond::Matrix(p) => (p * DVector::from_column_slice(m)).as_slice().to_vec(),
        }
    }
}

/// Optimizer state owned by one agent.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    delta: f64,
    m: Vec<f64>,
    // After `update_second_moment` at step t: `u` is u^t and `u_prev` is u^{t-1}.
    // Before it: `u` is u^{t-1} and `u_prev` is u^{t-2}.
    u: Moment,
    u_prev: Moment,
    u_hat: Vec<f64>,
    precond: Precond,
    precond_prev: Precond,
    steps: u64,
    inv_sqrt_diff_sum: f64,
}

impl OptimizerState {
    pub fn new(spec: &OptimizerSpec, d: usize) -> Result<Self> {
        spec.validate()?;
        if spec.kind == OptimizerKind::MatrixAdagrad && d > MATRIX_ADAGRAD_MAX_DIM {
            return Err(Error::Optimizer(format!(
                "matrix_adagrad supports d <= {MATRIX_ADAGRAD_MAX_DIM}, got {d}"
            )));
        }
        let u = Moment::zeros(spec.kind, d);
        let precond = Precond::of(&u, spec.delta);
        Ok(OptimizerState {
            kind: spec.kind,
            delta: spec.delta,
            m: vec![0.0; d],
            u_prev: u.clone(),
            u,
            u_hat: vec![0.0; d],
            precond_prev: precond.clone(),
            precond,
            steps: 0,
            inv_sqrt_diff_sum: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    /// Latest second moment.
    pub fn u(&self) -> &Moment {
        &self.u
    }

    /// Second moment one step behind [`Self::u`].
    pub fn u_prev(&self) -> &Moment {
        &self.u_prev
    }

    pub fn u_hat(&self) -> &[f64] {
        &self.u_hat
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Running `sum_t ||(u^{t-2}+delta)^{-1/2} - (u^{t-1}+delta)^{-1/2}||^2`
    /// over the steps taken so far.
    pub fn inv_sqrt_diff_sum(&self) -> f64 {
        self.inv_sqrt_diff_sum
    }

    pub fn update_first_moment(&mut self, g: &[f64], beta1: f64) -> Result<&[f64]> {
        check_dim(self.m.len(), g.len())?;
        check_finite(g, "gradient")?;
        for (m, &gi) in self.m.iter_mut().zip(g) {
            *m = beta1 * *m + (1.0 - beta1) * gi;
        }
        Ok(&self.m)
    }

    /// Advances the second moment from `u^{t-1}` to `u^t` and adds step t's
    /// term to the inverse-square-root difference accumulator.
    pub fn update_second_moment(&mut self, spec: &OptimizerSpec, g: &[f64]) -> Result<()> {
        check_dim(self.m.len(), g.len())?;
        check_finite(g, "gradient")?;
        if spec.kind != self.kind {
            return Err(Error::Optimizer(format!(
                "state was created for {}, got {}",
                self.kind.name(),
                spec.kind.name()
            )));
        }
        self.inv_sqrt_diff_sum += self.precond_prev.dist_sq(&self.precond);

        let t = self.steps as f64;
        let next = match (&self.u, self.kind) {
            (Moment::Diag(u), OptimizerKind::VanillaSgd | OptimizerKind::MomentumSgd) => {
                Moment::Diag(vec![0.0; u.len()])
            }
            (Moment::Diag(u), OptimizerKind::Amsgrad) => {
                let b2 = spec.beta2;
                for (h, &gi) in self.u_hat.iter_mut().zip(g) {
                    *h = b2 * *h + (1.0 - b2) * gi * gi;
                }
                Moment::Diag(u.iter().zip(&self.u_hat).map(|(a, b)| a.max(*b)).collect())
            }
            (Moment::Diag(u), OptimizerKind::Adam) => {
                let b2 = spec.beta2;
                Moment::Diag(
                    u.iter()
                        .zip(g)
                        .map(|(&ui, &gi)| b2 * ui + (1.0 - b2) * gi * gi)
                        .collect(),
                )
            }
            (Moment::Diag(u), OptimizerKind::AdamMini) => {
                let b2 = spec.beta2;
                let mean = g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64;
                Moment::Diag(u.iter().map(|&ui| b2 * ui + (1.0 - b2) * mean).collect())
            }
            (Moment::Diag(u), OptimizerKind::AvgAdagrad) => Moment::Diag(
                u.iter()
                    .zip(g)
                    .map(|(&ui, &gi)| ui + (gi * gi - ui) / (t + 1.0))
                    .collect(),
            ),
            (Moment::Matrix(u), OptimizerKind::MatrixAdagrad) => {
                let gv = DVector::from_column_slice(g);
                let outer = &gv * gv.transpose();
                Moment::Matrix(u + (outer - u) / (t + 1.0))
            }
            _ => unreachable!("moment shape is fixed by kind"),
        };
        debug_assert!(match &next {
            Moment::Diag(v) => v.iter().all(|&x| x >= 0.0),
            Moment::Matrix(_) => true,
        });

        self.u_prev = std::mem::replace(&mut self.u, next);
        let precond = Precond::of(&self.u, self.delta);
        self.precond_prev = std::mem::replace(&mut self.precond, precond);
        self.steps += 1;
        Ok(())
    }

    /// `x - alpha (u^{t-1} + delta)^{-1/2} m^t`, using the lagged moment.
    /// Call after both moment updates of the current step.
    pub fn local_step(&self, x: &[f64], spec: &OptimizerSpec) -> Result<Vec<f64>> {
        check_dim(self.m.len(), x.len())?;
        if !(spec.delta > 0.0) {
            return Err(Error::config("optimizer.delta", "must be positive"));
        }
        let scaled = self.precond_prev.apply(&self.m);
        Ok(x
            .iter()
            .zip(scaled)
            .map(|(xi, s)| xi - spec.alpha * s)
            .collect())
    }

    /// Full local update for one stochastic gradient.
    pub fn step(&mut self, spec: &OptimizerSpec, g: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.update_first_moment(g, spec.beta1)?;
        self.update_second_moment(spec, g)?;
        self.local_step(x, spec)
    }
}
