//! Synthetic objectives split across agents.
//!
//! The global objective is `f(x) = (1/n) sum_i f_i(x)` where `f_i` is the
//! mean per-sample loss over agent `i`'s shard plus `lambda/2 ||x||^2`.
//! Three per-sample losses are provided:
//!
//! - least squares: `(a^T x - b)^2 / 2`
//! - logistic: `ln(1 + exp(-y a^T x))`, labels `y in {-1, +1}`
//! - sigmoid (nonconvex): `(1 - sigmoid(y a^T x))^2`
//!
//! The pooled dataset depends only on the data seed, never on the partition,
//! so IID and Dirichlet splits of the same problem share their samples.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    LeastSquares,
    Logistic,
    SigmoidNonconvex,
}

impl ProblemKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::LeastSquares => "least_squares",
            ProblemKind::Logistic => "logistic",
            ProblemKind::SigmoidNonconvex => "sigmoid_nonconvex",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum Partition {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    #[serde(flatten)]
    pub scheme: Partition,
    #[serde(default)]
    pub seed: u64,
}

impl PartitionPlan {
    pub fn iid(seed: u64) -> Self {
        PartitionPlan {
            scheme: Partition::Iid,
            seed,
        }
    }

    pub fn dirichlet(alpha: f64, seed: u64) -> Self {
        PartitionPlan {
            scheme: Partition::Dirichlet { alpha },
            seed,
        }
    }
}

fn default_noise() -> f64 {
    0.1
}
fn default_separation() -> f64 {
    1.0
}

/// Everything [`make_problem`] needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemParams {
    pub kind: ProblemKind,
    pub d: usize,
    pub agents: usize,
    pub samples_per_agent: usize,
    #[serde(default)]
    pub lambda: f64,
    /// Per-coordinate clip applied to stochastic gradients after averaging.
    #[serde(default)]
    pub clip: Option<f64>,
    /// Target noise standard deviation (least squares).
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Distance of each class mean from the origin (classification kinds).
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

/// One agent's samples; `features` is row-major with `d` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn row(&self, k: usize, d: usize) -> &[f64] {
        &self.features[k * d..(k + 1) * d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Batch {
    /// Every sample of the shard exactly once.
    Full,
    /// `b` samples drawn uniformly with replacement.
    Sample(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSet {
    kind: ProblemKind,
    d: usize,
    lambda: f64,
    clip: Option<f64>,
    shards: Vec<Shard>,
    planted: Option<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(-z))` without overflow.
fn log1p_exp_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Supremum over `z` of `|h''(z)|` for `h(z) = (1 - sigmoid(z))^2`.
/// With `s = sigmoid(z)`, `h'' = -2 s (1-s)^2 (1 - 3s)`, maximized in
/// magnitude at `s = (9 + sqrt(33)) / 24`.
pub fn sigmoid_loss_curvature() -> f64 {
    let s = (9.0 + 33f64.sqrt()) / 24.0;
    2.0 * s * (1.0 - s).powi(2) * (3.0 * s - 1.0)
}

impl ProblemSet {
    /// Assembles a problem from explicit shards.
    pub fn from_shards(
        kind: ProblemKind,
        d: usize,
        lambda: f64,
        clip: Option<f64>,
        shards: Vec<Shard>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Problem("dimension must be positive".into()));
        }
        if shards.len() < 2 {
            return Err(Error::Problem(format!("need at least 2 agents, got {}", shards.len())));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Problem(format!("lambda must be nonnegative, got {lambda}")));
        }
        if let Some(c) = clip {
            if !(c > 0.0) {
                return Err(Error::Problem(format!("clip must be positive, got {c}")));
            }
        }
        for (i, s) in shards.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Problem(format!("agent {i} has no samples")));
            }
            check_dim(s.len() * d, s.features.len())?;
        }
        Ok(ProblemSet {
            kind,
            d,
            lambda,
            clip,
            shards,
            planted: None,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_agents(&self) -> usize {
        self.shards.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn clip(&self) -> Option<f64> {
        self.clip
    }

    pub fn set_clip(&mut self, clip: Option<f64>) {
        self.clip = clip;
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    /// Ground-truth parameter of a generated least-squares problem.
    pub fn planted(&self) -> Option<&[f64]> {
        self.planted.as_deref()
    }

    pub fn total_samples(&self) -> usize {
        self.shards.iter().map(Shard::len).sum()
    }

    /// Per-sample loss and (unregularized) gradient, accumulated into `grad`
    /// scaled by `weight`.
    fn sample_loss_grad(&self, a: &[f64], target: f64, x: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
        let z = dot(a, x);
        let (loss, dz) = match self.kind {
            ProblemKind::LeastSquares => {
                let r = z - target;
                (0.5 * r * r, r)
            }
            ProblemKind::Logistic => {
                let yz = target * z;
                (log1p_exp_neg(yz), -target * sigmoid(-yz))
            }
            ProblemKind::SigmoidNonconvex => {
                let s = sigmoid(target * z);
                let one_minus = 1.0 - s;
                (one_minus * one_minus, -2.0 * s * one_minus * one_minus * target)
            }
        };
        let c = weight * dz;
        for (gj, aj) in grad.iter_mut().zip(a) {
            *gj += c * aj;
        }
        loss
    }

    fn regularize(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += self.lambda * xi;
        }
        0.5 * self.lambda * dot(x, x)
    }

    /// Exact `(f_i(x), grad f_i(x))`.
    pub fn agent_loss_grad(&self, agent: usize, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.d, x.len())?;
        let shard = self
            .shards
            .get(agent)
            .ok_or_else(|| Error::Problem(format!("no agent {agent}")))?;
        let w = 1.0 / shard.len() as f64;
        let mut grad = vec![0.0; self.d];
        let mut loss = 0.0;
        for k in 0..shard.len() {
            loss += w * self.sample_loss_grad(shard.row(k, self.d), shard.targets[k], x, w, &mut grad);
        }
        loss += self.regularize(x, &mut grad);
        Ok((loss, grad))
    }

    /// Minibatch gradient of `f_i` at `x`, clipped per coordinate after
    /// averaging when a clip is configured.
    pub fn stochastic_grad<R: Rng + ?Sized>(
        &self,
        agent: usize,
        x: &[f64],
        batch: Batch,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        check_dim(self.d, x.len())?;
        check_finite(x, "gradient query point")?;
        let shard = self
            .shards
            .get(agent)
            .ok_or_else(|| Error::Problem(format!("no agent {agent}")))?;
        let mut grad = vec![0.0; self.d];
        match batch {
            Batch::Full => {
                let w = 1.0 / shard.len() as f64;
                for k in 0..shard.len() {
                    self.sample_loss_grad(shard.row(k, self.d), shard.targets[k], x, w, &mut grad);
                }
            }
            Batch::Sample(b) => {
                if b == 0 {
                    return Err(Error::Problem("batch size must be positive".into()));
                }
                let w = 1.0 / b as f64;
                for _ in 0..b {
                    let k = rng.random_range(0..shard.len());
                    self.sample_loss_grad(shard.row(k, self.d), shard.targets[k], x, w, &mut grad);
                }
            }
        }
        self.regularize(x, &mut grad);
        if let Some(c) = self.clip {
            for g in &mut grad {
                *g = g.clamp(-c, c);
            }
        }
        Ok(grad)
    }

    /// Exact global `(f(x), grad f(x))`.
    pub fn full_grad_and_loss(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.n_agents() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.d];
        for i in 0..self.n_agents() {
            let (li, gi) = self.agent_loss_grad(i, x)?;
            loss += li / n;
            for (g, v) in grad.iter_mut().zip(gi) {
                *g += v / n;
            }
        }
        Ok((loss, grad))
    }

    /// Smoothness constant of each `f_i`.
    ///
    /// Least squares uses the exact `lambda_max(A_i^T A_i / N_i)`. The other
    /// kinds bound the per-sample curvature times `lambda_max`, and bound
    /// `lambda_max` by the trace, i.e. the mean squared feature norm: `1/4` for
    /// logistic, [`sigmoid_loss_curvature`] for the sigmoid loss.
    pub fn agent_smoothness(&self) -> Vec<f64> {
        self.shards
            .iter()
            .map(|s| {
                let curv = match self.kind {
                    ProblemKind::LeastSquares => {
                        let a = nalgebra::DMatrix::from_row_slice(s.len(), self.d, &s.features);
                        let gram = a.transpose() * &a / s.len() as f64;
                        return gram.symmetric_eigenvalues().max() + self.lambda;
                    }
                    ProblemKind::Logistic => 0.25,
                    ProblemKind::SigmoidNonconvex => sigmoid_loss_curvature(),
                };
                let mean_sq = s.features.iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
                curv * mean_sq + self.lambda
            })
            .collect()
    }

    /// Global smoothness constant: the worst agent's.
    pub fn smoothness(&self) -> f64 {
        self.agent_smoothness().into_iter().fold(0.0, f64::max)
    }

    /// Writes one row per sample: `agent_id,label,features...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["agent_id".to_string(), "label".to_string()];
        header.extend((0..self.d).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (i, s) in self.shards.iter().enumerate() {
            for k in 0..s.len() {
                let mut rec = vec![i.to_string(), s.targets[k].to_string()];
                rec.extend(s.row(k, self.d).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`Self::write_csv`].
    pub fn read_csv<R: Read>(
        input: R,
        kind: ProblemKind,
        lambda: f64,
        clip: Option<f64>,
    ) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let d = r
            .headers()?
            .len()
            .checked_sub(2)
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Parse("dataset CSV needs agent_id, label and features".into()))?;
        let mut shards: Vec<Shard> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number {:?}", &rec[k])))
            };
            let agent: usize = rec[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad agent id {:?}", &rec[0])))?;
            if shards.len() <= agent {
                shards.resize(
                    agent + 1,
                    Shard {
                        features: Vec::new(),
                        targets: Vec::new(),
                    },
                );
            }
            shards[agent].targets.push(num(1)?);
            for k in 0..d {
                let v = num(k + 2)?;
                shards[agent].features.push(v);
            }
        }
        ProblemSet::from_shards(kind, d, lambda, clip, shards)
    }
}

/// Class id used for partitioning: label sign for classification, target
/// sign for least squares.
fn class_of(target: f64) -> usize {
    usize::from(target >= 0.0)
}

/// Generates a synthetic problem. Deterministic in `params.seed` and
/// `partition.seed`.
pub fn make_problem(params: &ProblemParams, partition: &PartitionPlan) -> Result<ProblemSet> {
    let ProblemParams {
        kind,
        d,
        agents,
        samples_per_agent,
        ..
    } = *params;
    if d == 0 {
        return Err(Error::config("problem.d", "must be at least 1"));
    }
    if agents < 2 {
        return Err(Error::config("problem.agents", "must be at least 2"));
    }
    if samples_per_agent == 0 {
        return Err(Error::config("problem.samples_per_agent", "must be at least 1"));
    }
    if let Partition::Dirichlet { alpha } = partition.scheme {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config("problem.partition.alpha", "must be positive"));
        }
    }
    if !(params.noise >= 0.0) {
        return Err(Error::config("problem.noise", "must be nonnegative"));
    }

    let total = agents * samples_per_agent;
    let mut rng = stream(params.seed, Purpose::Data, 0);
    let mut features = Vec::with_capacity(total * d);
    let mut targets = Vec::with_capacity(total);
    let mut planted = None;
    match kind {
        ProblemKind::LeastSquares => {
            let truth: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise = Normal::new(0.0, params.noise)
                .map_err(|e| Error::Problem(format!("noise: {e}")))?;
            for _ in 0..total {
                let a: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                targets.push(dot(&a, &truth) + noise.sample(&mut rng));
                features.extend(a);
            }
            planted = Some(truth);
        }
        ProblemKind::Logistic | ProblemKind::SigmoidNonconvex => {
            let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dot(&dir, &dir).sqrt();
            for v in &mut dir {
                *v *= params.separation / norm;
            }
            for k in 0..total {
                let y = if k % 2 == 0 { 1.0 } else { -1.0 };
                for v in &dir {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push(y * v + z);
                }
                targets.push(y);
            }
        }
    }

    let assignment = match partition.scheme {
        Partition::Iid => {
            let mut order: Vec<usize> = (0..total).collect();
            order.shuffle(&mut stream(partition.seed, Purpose::Partition, 0));
            let mut assign = vec![0; total];
            for (pos, &sample) in order.iter().enumerate() {
                assign[sample] = pos / samples_per_agent;
            }
            assign
        }
        Partition::Dirichlet { alpha } => {
            let labels: Vec<usize> = targets.iter().map(|&t| class_of(t)).collect();
            dirichlet_partition(&labels, agents, alpha, partition.seed)?
        }
    };

    let mut shards = vec![
        Shard {
            features: Vec::new(),
            targets: Vec::new(),
        };
        agents
    ];
    for (k, &agent) in assignment.iter().enumerate() {
        shards[agent].targets.push(targets[k]);
        shards[agent]
            .features
            .extend_from_slice(&features[k * d..(k + 1) * d]);
    }
    let mut problem = ProblemSet::from_shards(kind, d, params.lambda, params.clip, shards)?;
    problem.planted = planted;
    Ok(problem)
}

const PARTITION_RETRIES: usize = 1000;

/// Assigns samples to agents with per-class proportions drawn from
/// `Dirichlet(alpha 1_n)`, redrawing until every agent has a sample.
/// Returns the agent of each sample.
pub fn dirichlet_partition(
    labels: &[usize],
    n_agents: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Partition(format!("alpha must be positive, got {alpha}")));
    }
    if n_agents == 0 {
        return Err(Error::Partition("need at least one agent".into()));
    }
    if labels.len() < n_agents {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {n_agents} agents",
            labels.len()
        )));
    }
    let classes = labels.iter().copied().max().map_or(0, |c| c + 1);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Partition(e.to_string()))?;
    let mut rng = stream(seed, Purpose::Partition, 1);

    for _ in 0..PARTITION_RETRIES {
        let mut props = Vec::with_capacity(classes);
        for _ in 0..classes {
            let draws: Vec<f64> = (0..n_agents).map(|_| gamma.sample(&mut rng)).collect();
            let sum: f64 = draws.iter().sum();
            props.push(if sum > 0.0 && sum.is_finite() {
                let mut acc = 0.0;
                draws
                    .iter()
                    .map(|v| {
                        acc += v / sum;
                        acc
                    })
                    .collect::<Vec<_>>()
            } else {
                Vec::new()
            });
        }
        if props.iter().any(Vec::is_empty) {
            continue;
        }
        let mut counts = vec![0usize; n_agents];
        let assign: Vec<usize> = labels
            .iter()
            .map(|&c| {
                let u: f64 = rng.random();
                let cdf = &props[c];
                let agent = cdf.iter().position(|&p| u < p).unwrap_or(n_agents - 1);
                counts[agent] += 1;
                agent
            })
            .collect();
        if counts.iter().all(|&c| c > 0) {
            return Ok(assign);
        }
    }
    Err(Error::Partition(format!(
        "no partition with all {n_agents} agents nonempty after {PARTITION_RETRIES} draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kind: ProblemKind) -> ProblemParams {
        ProblemParams {
            kind,
            d: 3,
            agents: 3,
            samples_per_agent: 20,
            lambda: 0.01,
            clip: None,
            noise: 0.1,
            separation: 1.0,
            seed: 5,
        }
    }

    #[test]
    fn least_squares_is_psd_quadratic() {
        let p = make_problem(
            &ProblemParams {
                d: 2,
                agents: 2,
                ..params(ProblemKind::LeastSquares)
            },
            &PartitionPlan::iid(0),
        )
        .unwrap();
        assert_eq!(p.n_agents(), 2);
        assert_eq!(p.shards()[0].len(), 20);
        // Quadratic: f(x) - f(y) - <grad f(y), x - y> = (x-y)^T H (x-y)/2 >= 0.
        let (fy, gy) = p.full_grad_and_loss(&[0.3, -0.2]).unwrap();
        let (fx, _) = p.full_grad_and_loss(&[-1.0, 2.0]).unwrap();
        let lin = gy[0] * (-1.3) + gy[1] * 2.2;
        assert!(fx - fy - lin >= 0.0);
    }

    #[test]
    fn logistic_at_origin_is_ln2() {
        let p = make_problem(
            &ProblemParams {
                lambda: 0.0,
                ..params(ProblemKind::Logistic)
            },
            &PartitionPlan::iid(0),
        )
        .unwrap();
        let (f, _) = p.full_grad_and_loss(&[0.0; 3]).unwrap();
        assert!((f - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_planted_optimum_is_stationary() {
        let p = make_problem(
            &ProblemParams {
                noise: 0.0,
                lambda: 0.0,
                ..params(ProblemKind::LeastSquares)
            },
            &PartitionPlan::iid(0),
        )
        .unwrap();
        let truth = p.planted().unwrap().to_vec();
        let (_, g) = p.full_grad_and_loss(&truth).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn full_batch_equals_exact_gradient() {
        let p = make_problem(&params(ProblemKind::SigmoidNonconvex), &PartitionPlan::iid(0)).unwrap();
        let x = [0.2, -0.5, 1.0];
        let mut rng = stream(0, Purpose::Sampling, 0);
        for i in 0..3 {
            let g = p.stochastic_grad(i, &x, Batch::Full, &mut rng).unwrap();
            let (_, exact) = p.agent_loss_grad(i, &x).unwrap();
            for (a, b) in g.iter().zip(&exact) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clipping_bounds_coordinates() {
        let mut p = make_problem(&params(ProblemKind::LeastSquares), &PartitionPlan::iid(0)).unwrap();
        p.set_clip(Some(0.05));
        let mut rng = stream(0, Purpose::Sampling, 0);
        let g = p.stochastic_grad(0, &[10.0, -10.0, 10.0], Batch::Sample(4), &mut rng).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 0.05));
    }

    #[test]
    fn errors() {
        let p = make_problem(&params(ProblemKind::Logistic), &PartitionPlan::iid(0)).unwrap();
        let mut rng = stream(0, Purpose::Sampling, 0);
        assert!(p.stochastic_grad(0, &[f64::NAN, 0.0, 0.0], Batch::Full, &mut rng).is_err());
        assert!(p.stochastic_grad(0, &[0.0; 2], Batch::Full, &mut rng).is_err());
        assert!(p.stochastic_grad(0, &[0.0; 3], Batch::Sample(0), &mut rng).is_err());
        assert!(make_problem(
            &ProblemParams {
                agents: 1,
                ..params(ProblemKind::Logistic)
            },
            &PartitionPlan::iid(0)
        )
        .is_err());
        assert!(make_problem(&params(ProblemKind::Logistic), &PartitionPlan::dirichlet(0.0, 0)).is_err());
    }

    #[test]
    fn dirichlet_partition_counts() {
        let labels: Vec<usize> = (0..1000).map(|k| k % 2).collect();
        let a = dirichlet_partition(&labels, 2, 0.5, 3).unwrap();
        assert_eq!(a.len(), 1000);
        let c0 = a.iter().filter(|&&x| x == 0).count();
        assert!(c0 > 0 && c0 < 1000);
        assert_eq!(a, dirichlet_partition(&labels, 2, 0.5, 3).unwrap());
    }

    #[test]
    fn dirichlet_large_alpha_is_near_uniform() {
        let labels: Vec<usize> = (0..4000).map(|k| k % 2).collect();
        let a = dirichlet_partition(&labels, 4, 1e6, 1).unwrap();
        for agent in 0..4 {
            let c = a.iter().filter(|&&x| x == agent).count();
            assert!((c as f64 - 1000.0).abs() < 120.0, "agent {agent}: {c}");
        }
    }

    #[test]
    fn dirichlet_exhausts_on_tiny_data() {
        assert!(dirichlet_partition(&[0], 2, 1.0, 0).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let p = make_problem(&params(ProblemKind::Logistic), &PartitionPlan::dirichlet(1.0, 2)).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let q = ProblemSet::read_csv(buf.as_slice(), ProblemKind::Logistic, 0.01, None).unwrap();
        assert_eq!(p.shards(), q.shards());
    }

    #[test]
    fn least_squares_smoothness_bounds_curvature() {
        let p = make_problem(&params(ProblemKind::LeastSquares), &PartitionPlan::iid(0)).unwrap();
        let l = p.smoothness();
        // Gradient Lipschitz check along a random direction.
        let (_, g0) = p.agent_loss_grad(0, &[0.0; 3]).unwrap();
        let (_, g1) = p.agent_loss_grad(0, &[1.0, -1.0, 0.5]).unwrap();
        let dg = g0.iter().zip(&g1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dg <= l * 2.25f64.sqrt() + 1e-12);
    }
}
