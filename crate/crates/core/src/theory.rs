//! Empirical checks of the regret, generalization and stability guarantees.
//!
//! The generalization bound is only checkable where its assumptions hold, so
//! it is exercised on a convex family: two-class logistic regression with
//! parameters confined to an l2 ball and losses scaled into `[0, 1]`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::attack::AttackSpec;
use crate::generalist::{
    mixing_weights, train_generalist, GammaSchedule, GeneralistConfig, GeneralistRun, SyncSchedule, Variant,
};
use crate::harness::data::{gen_gaussians, EpochPlan};
use crate::harness::experiment::variant_tasks;
use crate::learner::{BaseLearner, OptimizerKind, OptimizerState, ScheduleSpec};
use crate::model::{cross_entropy, per_example_ce, Activation, Batch, Model};
use crate::numeric::{ParameterVector, RngStream};

/// Realized per-round losses of each task's trajectory and the cumulative
/// loss of each task's best fixed parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    pub per_task_losses: Vec<Vec<f64>>,
    pub oracle_losses: Vec<f64>,
}

impl RegretLedger {
    pub fn new(per_task_losses: Vec<Vec<f64>>, oracle_losses: Vec<f64>) -> Result<Self> {
        let l = Self {
            per_task_losses,
            oracle_losses,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_task_losses.is_empty() || self.per_task_losses.len() != self.oracle_losses.len() {
            return Err(Error::Shape(format!(
                "{} loss rows for {} oracle values",
                self.per_task_losses.len(),
                self.oracle_losses.len()
            )));
        }
        let t = self.per_task_losses[0].len();
        if self.per_task_losses.iter().any(|r| r.len() != t) {
            return Err(Error::Shape("tasks disagree on the number of rounds".into()));
        }
        let all = self.per_task_losses.iter().flatten().chain(&self.oracle_losses);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite loss in regret ledger".into()));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.per_task_losses.first().map_or(0, Vec::len)
    }
}

/// Task-averaged gap between trajectory loss and best fixed loss.
pub fn regret(ledger: &RegretLedger) -> Result<f64> {
    ledger.validate()?;
    let a = ledger.per_task_losses.len() as f64;
    let total: f64 = ledger
        .per_task_losses
        .iter()
        .zip(&ledger.oracle_losses)
        .map(|(row, o)| row.iter().sum::<f64>() - o)
        .sum();
    Ok(total / a)
}

/// Logistic regression on a fixed point set, `theta` constrained to
/// `||theta||_2 <= radius`. Labels are `+1` / `-1`. The loss is divided by
/// `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexTask {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub radius: f64,
    pub scale: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl ConvexTask {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<f64>, radius: f64) -> Result<Self> {
        if points.is_empty() || points.len() != labels.len() {
            return Err(Error::Shape(format!("{} points for {} labels", points.len(), labels.len())));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::Shape("points must share one positive dimension".into()));
        }
        if labels.iter().any(|y| y.abs() != 1.0) {
            return Err(Error::Domain("labels must be +1 or -1".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::Domain(format!("radius {radius} must be positive")));
        }
        Ok(Self {
            points,
            labels,
            radius,
            scale: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Scale that maps the loss into `[0, 1]` over the whole ball, given a
    /// bound on the input norm.
    pub fn unit_scale(radius: f64, max_input_norm: f64) -> f64 {
        softplus(radius * max_input_norm)
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Largest loss any parameter in the ball can incur on these points.
    pub fn loss_upper_bound(&self) -> f64 {
        let m = self.points.iter().map(|p| norm2(p)).fold(0.0, f64::max);
        softplus(self.radius * m) / self.scale
    }

    pub fn point_loss(&self, theta: &[f64], i: usize) -> f64 {
        softplus(-self.labels[i] * dot(theta, &self.points[i])) / self.scale
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        (0..self.points.len()).map(|i| self.point_loss(theta, i)).sum::<f64>() / self.points.len() as f64
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.points.len() as f64;
        let mut g = vec![0.0; self.dim()];
        for (x, &y) in self.points.iter().zip(&self.labels) {
            let s = -y * sigmoid(-y * dot(theta, x));
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += s * xi / (n * self.scale);
            }
        }
        g
    }

    fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let n = self.points.len() as f64;
        let mut h = vec![0.0; d * d];
        for x in &self.points {
            let p = sigmoid(dot(theta, x));
            let w = p * (1.0 - p) / (n * self.scale);
            for (r, xr) in x.iter().enumerate() {
                let wr = w * xr;
                for (c, xc) in x.iter().enumerate() {
                    h[r * d + c] += wr * xc;
                }
            }
        }
        DMatrix::from_row_slice(d, d, &h)
    }

    pub fn project(&self, theta: &mut [f64]) {
        let n = norm2(theta);
        if n > self.radius {
            theta.iter_mut().for_each(|v| *v *= self.radius / n);
        }
    }
}

/// Gradient-norm target of the oracle.
pub const ORACLE_TOL: f64 = 1e-8;

/// Minimizer of `loss + lambda/2 ||theta||^2` by damped Newton. Returns
/// `None` when the iterate leaves the ball (only relevant at `lambda = 0`).
fn newton_regularized(task: &ConvexTask, lambda: f64, start: &[f64], bail_outside: bool) -> Option<Vec<f64>> {
    let d = task.dim();
    let obj = |t: &[f64]| task.loss(t) + 0.5 * lambda * dot(t, t);
    let mut theta = start.to_vec();
    for _ in 0..200 {
        let mut g = task.grad(&theta);
        for (gi, ti) in g.iter_mut().zip(&theta) {
            *gi += lambda * ti;
        }
        if norm2(&g) < ORACLE_TOL * 1e-3 {
            return Some(theta);
        }
        let h = task.hessian(&theta) + DMatrix::identity(d, d) * (lambda + 1e-14);
        let step = h.cholesky()?.solve(&DVector::from_column_slice(&g));
        let f0 = obj(&theta);
        let slope = -dot(step.as_slice(), &g);
        if -slope <= 1e-16 * f0.abs() {
            // Newton decrement below the rounding of the objective
            return Some(theta);
        }
        let mut t = 1.0;
        let mut next: Vec<f64>;
        loop {
            next = theta.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            if obj(&next) <= f0 + 1e-4 * t * slope {
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                // no decrease above rounding left
                return Some(theta);
            }
        }
        if next == theta {
            return Some(theta);
        }
        theta = next;
        if bail_outside && norm2(&theta) > task.radius * (1.0 + 1e-9) {
            return None;
        }
    }
    Some(theta)
}

/// KKT residual on the ball: full gradient norm inside, tangential gradient
/// norm (with an outward-pointing check) on the boundary.
pub fn kkt_residual(task: &ConvexTask, theta: &[f64]) -> f64 {
    let g = task.grad(theta);
    let n = norm2(theta);
    if n < task.radius * (1.0 - 1e-9) {
        return norm2(&g);
    }
    let radial = dot(&g, theta) / n;
    let tang: Vec<f64> = g.iter().zip(theta).map(|(gi, ti)| gi - radial * ti / n).collect();
    // at the boundary the gradient must point inward (radial <= 0)
    norm2(&tang) + radial.max(0.0)
}

/// Global minimizer of the (convex) task loss over the ball.
pub fn minimize_on_ball(task: &ConvexTask) -> Result<Vec<f64>> {
    let d = task.dim();
    let zero = vec![0.0; d];
    if let Some(t) = newton_regularized(task, 0.0, &zero, true) {
        if norm2(&t) <= task.radius && kkt_residual(task, &t) < ORACLE_TOL {
            return Ok(t);
        }
    }
    // constrained: ||theta(lambda)|| decreases in lambda; find ||theta|| = radius
    let solve = |lambda: f64, start: &[f64]| {
        newton_regularized(task, lambda, start, false)
            .ok_or_else(|| Error::Numeric(format!("Newton step failed at lambda {lambda}")))
    };
    // losses are scaled into [0, 1], so the multiplier sits well below 1
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut at_hi = solve(hi, &zero)?;
    let mut guard = 0;
    while norm2(&at_hi) > task.radius {
        lo = hi;
        hi *= 4.0;
        at_hi = solve(hi, &at_hi)?;
        guard += 1;
        if guard > 200 {
            return Err(Error::Numeric("could not bracket the ball multiplier".into()));
        }
    }
    // safeguarded Newton on 1/||theta(lambda)|| = 1/radius, which is
    // nearly linear in lambda
    let mut lambda = hi;
    let mut best = at_hi;
    for _ in 0..200 {
        let n = norm2(&best);
        if (n - task.radius).abs() <= 1e-10 * task.radius || hi - lo <= 1e-15 * hi {
            break;
        }
        let h = task.hessian(&best) + DMatrix::identity(d, d) * lambda;
        let next = match h.cholesky() {
            Some(ch) => {
                let th = DVector::from_column_slice(&best);
                let slope = th.dot(&ch.solve(&th)) / (n * n * n);
                lambda - (1.0 / n - 1.0 / task.radius) / slope
            }
            None => f64::NAN,
        };
        lambda = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        let t = solve(lambda, &best)?;
        if norm2(&t) > task.radius {
            lo = lambda;
        } else {
            hi = lambda;
        }
        best = t;
    }
    if norm2(&best) > task.radius * (1.0 + 1e-9) {
        best = solve(hi, &best)?;
    }
    let n = norm2(&best);
    let mut theta = best;
    if n > 0.0 {
        theta.iter_mut().for_each(|v| *v *= task.radius / n);
    }
    let r = kkt_residual(task, &theta);
    if r >= ORACLE_TOL {
        return Err(Error::Numeric(format!("oracle did not converge: KKT residual {r:e}")));
    }
    Ok(theta)
}

/// Cumulative loss over `rounds` repetitions of the task of its single best
/// fixed parameter.
pub fn oracle_best_fixed(task: &ConvexTask, rounds: usize) -> Result<f64> {
    let theta = minimize_on_ball(task)?;
    Ok(rounds as f64 * task.loss(&theta))
}

/// `2 sqrt((2 / T) ln(1 / delta))`.
pub fn concentration_term(rounds: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) || rounds == 0 {
        return Err(Error::Domain(format!("need 0 < delta < 1 and T >= 1, got {delta}, {rounds}")));
    }
    Ok(2.0 * ((2.0 / rounds as f64) * (1.0 / delta).ln()).sqrt())
}

/// Two tasks: clean blobs and blobs under a fixed label-dependent shift
/// toward the other class. Features are clipped to `[-clip, clip]` and a
/// constant bias feature is appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexFamily {
    pub dim: usize,
    pub radius: f64,
    pub mean_norm: f64,
    pub noise: f64,
    pub shift: f64,
    pub clip: f64,
    /// Samples per task per round.
    pub per_round: usize,
    pub holdout: usize,
    /// Weight of the clean task in the mixture.
    pub gamma: f64,
    pub ema_decay: f64,
    pub t_prime: usize,
    pub c: usize,
}

impl Default for ConvexFamily {
    fn default() -> Self {
        Self {
            dim: 2,
            radius: 3.0,
            mean_norm: 1.0,
            noise: 0.8,
            shift: 0.6,
            clip: 2.0,
            per_round: 4,
            holdout: 10_000,
            gamma: 0.5,
            ema_decay: 0.9,
            t_prime: 60,
            c: 5,
        }
    }
}

struct TrialTasks {
    mean: Vec<f64>,
    dir: Vec<f64>,
}

impl ConvexFamily {
    fn max_input_norm(&self) -> f64 {
        (self.dim as f64 * self.clip * self.clip + 1.0).sqrt()
    }

    fn unit_vector(&self, rng: &mut RngStream) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
            let n = norm2(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    fn sample(&self, tasks: &TrialTasks, task: usize, n: usize, rng: &mut RngStream) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut pts = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let y = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let mut x: Vec<f64> = (0..self.dim)
                .map(|j| {
                    let s = if task == 1 { -self.shift * y * tasks.dir[j] } else { 0.0 };
                    (y * self.mean_norm * tasks.mean[j] + self.noise * rng.normal() + s).clamp(-self.clip, self.clip)
                })
                .collect();
            x.push(1.0);
            pts.push(x);
            ys.push(y);
        }
        (pts, ys)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub trials: usize,
    pub delta: f64,
    pub rounds: usize,
    pub concentration: f64,
    /// Held-out expected loss of the final global parameters.
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    /// Held-out expected loss of the average global iterate.
    pub avg_iterate_lhs: Vec<f64>,
    pub regret: Vec<f64>,
    pub violation_fraction: f64,
}

struct TrialOutcome {
    lhs: f64,
    rhs: f64,
    avg_lhs: f64,
    regret: f64,
}

fn bound_trial(family: &ConvexFamily, rounds: usize, conc: f64, seed: u64, trial: usize) -> Result<TrialOutcome> {
    let mut rng = RngStream::new(seed, trial as u64);
    let tasks = TrialTasks {
        mean: family.unit_vector(&mut rng),
        dir: family.unit_vector(&mut rng),
    };
    let p = family.dim + 1;
    let scale = ConvexTask::unit_scale(family.radius, family.max_input_norm());
    let gammas = [family.gamma, 1.0 - family.gamma];
    let grad_bound = family.max_input_norm() / scale;
    let mut thetas = vec![vec![0.0; p]; 2];
    let mut theta_g = vec![0.0; p];
    let mut avg_g = vec![0.0; p];
    let mut losses = vec![Vec::with_capacity(rounds); 2];
    let mut pooled: Vec<(Vec<Vec<f64>>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); 2];
    for t in 1..=rounds {
        let eta = family.radius / (grad_bound * (t as f64).sqrt());
        for a in 0..2 {
            let (pts, ys) = family.sample(&tasks, a, family.per_round, &mut rng);
            let round = ConvexTask::new(pts.clone(), ys.clone(), family.radius)?.with_scale(scale);
            let l = round.loss(&thetas[a]);
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Domain(format!("loss {l} escaped [0, 1]")));
            }
            losses[a].push(l);
            let g = round.grad(&thetas[a]);
            for (th, gi) in thetas[a].iter_mut().zip(&g) {
                *th -= eta * gi;
            }
            round.project(&mut thetas[a]);
            pooled[a].0.extend(pts);
            pooled[a].1.extend(ys);
        }
        for j in 0..p {
            let mixed = gammas[0] * thetas[0][j] + gammas[1] * thetas[1][j];
            theta_g[j] = family.ema_decay * theta_g[j] + (1.0 - family.ema_decay) * mixed;
            avg_g[j] += theta_g[j] / rounds as f64;
        }
        if t >= family.t_prime && t % family.c == 0 {
            for th in thetas.iter_mut() {
                th.clone_from(&theta_g);
            }
        }
    }
    let mut oracle = Vec::with_capacity(2);
    for (pts, ys) in pooled {
        let task = ConvexTask::new(pts, ys, family.radius)?.with_scale(scale);
        oracle.push(oracle_best_fixed(&task, rounds)?);
    }
    let r = regret(&RegretLedger::new(losses, oracle)?)?;
    // held-out mixture: task a contributes in proportion to gamma_a
    let n_clean = (family.holdout as f64 * 2.0 * gammas[0]).round() as usize;
    let (mut pts, mut ys) = family.sample(&tasks, 0, n_clean, &mut rng);
    let (p1, y1) = family.sample(&tasks, 1, 2 * family.holdout - n_clean, &mut rng);
    pts.extend(p1);
    ys.extend(y1);
    let holdout = ConvexTask::new(pts, ys, family.radius)?.with_scale(scale);
    let theta_ref = minimize_on_ball(&holdout)?;
    let lhs = holdout.loss(&theta_g);
    Ok(TrialOutcome {
        lhs,
        rhs: holdout.loss(&theta_ref) + r / rounds as f64 + conc,
        avg_lhs: holdout.loss(&avg_g),
        regret: r,
    })
}

/// Runs `trials` independent draws of the convex family, each with two
/// online projected-gradient learners aggregated into a global learner, and
/// checks the expected-error bound at confidence `1 - delta`.
pub fn check_error_bound(family: &ConvexFamily, trials: usize, delta: f64, rounds: usize, seed: u64) -> Result<BoundReport> {
    let conc = concentration_term(rounds, delta)?;
    if trials == 0 {
        return Err(Error::Domain("need at least one trial".into()));
    }
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|i| bound_trial(family, rounds, conc, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let violations = outcomes.iter().filter(|o| o.lhs > o.rhs).count();
    Ok(BoundReport {
        trials,
        delta,
        rounds,
        concentration: conc,
        lhs: outcomes.iter().map(|o| o.lhs).collect(),
        rhs: outcomes.iter().map(|o| o.rhs).collect(),
        avg_iterate_lhs: outcomes.iter().map(|o| o.avg_lhs).collect(),
        regret: outcomes.iter().map(|o| o.regret).collect(),
        violation_fraction: violations as f64 / trials as f64,
    })
}

/// Slack allowed for the mixing inequality.
pub const MIXING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingCase {
    pub gamma: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub label: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingLemmaReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest `lhs - rhs` seen; negative when every trial holds.
    pub worst_slack: f64,
    pub worst_case: Option<MixingCase>,
}

impl MixingLemmaReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn mix(gamma: &[f64], preds: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; preds[0].len()];
    for (g, p) in gamma.iter().zip(preds) {
        for (o, x) in out.iter_mut().zip(p) {
            *o += g * x;
        }
    }
    out
}

/// Both sides of the convex-mixing inequality for cross-entropy over mixed logits:
/// `|l(sum g u) - l(sum g v)|` and `sum g |l(u_a) - l(v_a)|`.
pub fn mixing_sides(gamma: &[f64], u: &[Vec<f64>], v: &[Vec<f64>], label: usize) -> (f64, f64) {
    let lhs = (cross_entropy(&mix(gamma, u), label) - cross_entropy(&mix(gamma, v), label)).abs();
    let rhs = gamma
        .iter()
        .zip(u.iter().zip(v))
        .map(|(g, (ua, va))| g * (cross_entropy(ua, label) - cross_entropy(va, label)).abs())
        .sum();
    (lhs, rhs)
}

/// Randomized probe of the convex-mixing inequality with `K <= 5` classes
/// and up to 4 learners.
pub fn check_mixing_lemma(trials: usize, seed: u64) -> MixingLemmaReport {
    let mut rng = RngStream::new(seed, 0);
    let mut violations = 0;
    let mut worst_slack = f64::NEG_INFINITY;
    let mut worst_case = None;
    for _ in 0..trials {
        let k = 2 + rng.below(4);
        let a = 1 + rng.below(4);
        let raw: Vec<f64> = (0..a).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let s: f64 = raw.iter().sum();
        let gamma: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let spread = 5.0 * rng.uniform();
        let draw = |rng: &mut RngStream| -> Vec<Vec<f64>> {
            (0..a).map(|_| (0..k).map(|_| spread * rng.normal()).collect()).collect()
        };
        let u = draw(&mut rng);
        let v = draw(&mut rng);
        let label = rng.below(k);
        let (lhs, rhs) = mixing_sides(&gamma, &u, &v, label);
        let slack = lhs - rhs;
        if slack > MIXING_TOL {
            violations += 1;
        }
        if slack > worst_slack {
            worst_slack = slack;
            worst_case = Some(MixingCase {
                gamma,
                u,
                v,
                label,
                lhs,
                rhs,
            });
        }
    }
    MixingLemmaReport {
        trials,
        violations,
        worst_slack,
        worst_case,
    }
}

/// Fixed training setup for the stability probe: every retrain starts from
/// the same learners, global parameters and minibatch order.
#[derive(Clone)]
pub struct ProbeSetup {
    pub config: GeneralistConfig,
    pub learners: Vec<BaseLearner>,
    pub theta0: ParameterVector,
    pub train: Batch,
    pub test: Batch,
    pub batch_size: usize,
    pub seed: u64,
    /// Artifact constant for the qualitative check `eps_g <= eps_oplus + kappa drift`.
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityProbe {
    pub swaps: Vec<(usize, usize)>,
    pub gamma: Vec<f64>,
    pub per_task_eps: Vec<f64>,
    pub global_eps: f64,
    /// `sum_a gamma_a ||theta_a - theta_bar||^2` on the unperturbed run.
    pub drift: f64,
    pub eps_oplus: f64,
    /// `(eps_g - eps_oplus) / drift`, or 0 when drift is 0.
    pub ratio: f64,
    pub kappa: f64,
    pub within_kappa: bool,
}

struct Trained {
    learners: Vec<ParameterVector>,
    global: ParameterVector,
    previous: Option<ParameterVector>,
}

fn retrain(setup: &ProbeSetup, train: &Batch) -> Result<Trained> {
    let mut run = GeneralistRun::new(setup.config.clone(), setup.learners.clone(), setup.theta0.clone())?;
    let plan = EpochPlan {
        data: train,
        batch_size: setup.batch_size,
        seed: setup.seed,
    };
    train_generalist(&mut run, &plan, |_| Ok(()))?;
    let learners = if run.last_mixed_inputs.is_empty() {
        run.learners.iter().map(|l| l.model.params().clone()).collect()
    } else {
        run.last_mixed_inputs.clone()
    };
    Ok(Trained {
        learners,
        global: run.global.theta_g.clone(),
        previous: run.global.previous.clone(),
    })
}

fn test_losses(template: &Model, params: &ParameterVector, test: &Batch) -> Result<Vec<f64>> {
    let m = template.with_params(params.clone())?;
    per_example_ce(&m.forward(&test.inputs)?, &test.labels)
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Replaces training example `i` with a copy of example `j` for each swap,
/// retrains from the fixed setup, and records the largest change in clean
/// test loss of every base learner and of the global learner.
pub fn stability_probe(setup: &ProbeSetup, swaps: &[(usize, usize)]) -> Result<StabilityProbe> {
    let n = setup.train.len();
    if swaps.iter().any(|&(i, j)| i >= n || j >= n) {
        return Err(Error::Domain(format!("swap index outside 0..{n}")));
    }
    let template = setup.learners[0].model.clone();
    let base = retrain(setup, &setup.train)?;
    let base_task: Vec<Vec<f64>> = base
        .learners
        .iter()
        .map(|p| test_losses(&template, p, &setup.test))
        .collect::<Result<_>>()?;
    let base_global = test_losses(&template, &base.global, &setup.test)?;
    let a = base.learners.len();
    let mut per_task_eps = vec![0.0f64; a];
    let mut global_eps: f64 = 0.0;
    for (trial, &(i, j)) in swaps.iter().enumerate() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx[i] = j;
        let swapped = setup.train.select(&idx);
        let t = retrain(setup, &swapped).map_err(|e| Error::Numeric(format!("stability trial {trial}: {e}")))?;
        for (k, p) in t.learners.iter().enumerate() {
            per_task_eps[k] = per_task_eps[k].max(sup_diff(&base_task[k], &test_losses(&template, p, &setup.test)?));
        }
        global_eps = global_eps.max(sup_diff(&base_global, &test_losses(&template, &t.global, &setup.test)?));
    }
    let last = setup.config.sync.total_epochs.saturating_sub(1);
    let gamma = mixing_weights(&setup.config, last)?;
    let eps_oplus = gamma.iter().zip(&per_task_eps).map(|(g, e)| g * e).sum();
    let bar = base.previous.as_ref().unwrap_or(&setup.theta0);
    let drift = gamma
        .iter()
        .zip(&base.learners)
        .map(|(g, p)| p.squared_distance(bar).map(|d| g * d))
        .sum::<Result<f64>>()?;
    let ratio = if drift > 0.0 { (global_eps - eps_oplus) / drift } else { 0.0 };
    Ok(StabilityProbe {
        swaps: swaps.to_vec(),
        gamma,
        per_task_eps,
        global_eps,
        drift,
        eps_oplus,
        ratio,
        kappa: setup.kappa,
        within_kappa: global_eps.is_finite() && global_eps <= eps_oplus + setup.kappa * drift,
    })
}

/// A 32-example two-blob problem with a 2-4-2 tanh network and the
/// natural + l-inf pair, small enough to retrain once per swap.
/// `gamma1` fixes the first learner's mixing weight for the whole run.
pub fn small_probe_setup(seed: u64, gamma1: Option<f64>, ema_decay: f64) -> Result<ProbeSetup> {
    let data = gen_gaussians(seed, 32, 64, 2, 2, 0.5)?;
    let epochs = 4;
    let mut config = GeneralistConfig::new(Variant::DNatLinf, epochs);
    config.ema_decay = ema_decay;
    config.sync = SyncSchedule {
        t_prime: 2,
        c: 1,
        total_epochs: epochs,
    };
    if let Some(g) = gamma1 {
        config.gamma1 = GammaSchedule::constant(g);
    }
    let model = Model::init(vec![2, 4, 2], Activation::Tanh, &mut RngStream::new(seed, 0))?;
    let learners = variant_tasks(Variant::DNatLinf)
        .into_iter()
        .enumerate()
        .map(|(i, task)| {
            let opt = OptimizerState::new(OptimizerKind::sgd(0.9), 0.1, 0.0, model.params())?;
            let attack = task.norm().map(|n| AttackSpec::training(n, 0.05));
            BaseLearner::new(
                task,
                model.clone(),
                opt,
                attack,
                None,
                ScheduleSpec::constant(epochs),
                RngStream::new(seed, 100 + i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeSetup {
        config,
        theta0: model.params().clone(),
        learners,
        train: data.train,
        test: data.test,
        batch_size: 8,
        seed,
        kappa: 10.0,
    })
}

/// [`stability_probe`] over `replacements` random swaps `i <- j` with `i != j`.
pub fn stability_probe_random(setup: &ProbeSetup, replacements: usize, seed: u64) -> Result<StabilityProbe> {
    let n = setup.train.len();
    if n < 2 {
        return Err(Error::Domain("need at least two training examples".into()));
    }
    let mut rng = RngStream::new(seed, 7);
    let swaps: Vec<(usize, usize)> = (0..replacements)
        .map(|_| {
            let i = rng.below(n);
            let j = (i + 1 + rng.below(n - 1)) % n;
            (i, j)
        })
        .collect();
    stability_probe(setup, &swaps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(rows: Vec<Vec<f64>>, oracle: Vec<f64>) -> RegretLedger {
        RegretLedger::new(rows, oracle).unwrap()
    }

    #[test]
    fn regret_examples() {
        assert_eq!(regret(&ledger(vec![vec![0.3, 0.3]], vec![0.6])).unwrap(), 0.0);
        assert!((regret(&ledger(vec![vec![0.5, 0.4]], vec![0.6])).unwrap() - 0.3).abs() < 1e-15);
        let r = regret(&ledger(vec![vec![0.5, 0.4], vec![0.2, 0.9]], vec![0.6, 0.1])).unwrap();
        let r2 = regret(&ledger(vec![vec![1.0, 0.8], vec![0.4, 1.8]], vec![1.2, 0.2])).unwrap();
        assert!((r2 - 2.0 * r).abs() < 1e-15);
        let reordered = regret(&ledger(vec![vec![0.4, 0.5], vec![0.9, 0.2]], vec![0.6, 0.1])).unwrap();
        assert_eq!(r, reordered);
    }

    #[test]
    fn regret_shape_errors() {
        assert!(matches!(RegretLedger::new(vec![vec![0.1], vec![0.1, 0.2]], vec![0.0, 0.0]), Err(Error::Shape(_))));
        assert!(matches!(RegretLedger::new(vec![vec![0.1]], vec![0.0, 0.0]), Err(Error::Shape(_))));
    }

    fn grid_min(task: &ConvexTask) -> f64 {
        let steps = (2.0 * task.radius / 1e-4).round() as i64;
        (0..=steps)
            .map(|k| task.loss(&[-task.radius + k as f64 * 1e-4]))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn oracle_separable_hits_boundary() {
        let task = ConvexTask::new(
            vec![vec![1.0], vec![0.5], vec![-0.7], vec![-2.0]],
            vec![1.0, 1.0, -1.0, -1.0],
            2.0,
        )
        .unwrap();
        let theta = minimize_on_ball(&task).unwrap();
        assert!((theta[0] - 2.0).abs() < 1e-12);
        let o = oracle_best_fixed(&task, 10).unwrap();
        assert!((o / 10.0 - grid_min(&task)).abs() < 1e-9);
    }

    #[test]
    fn oracle_interior_matches_grid() {
        let task = ConvexTask::new(
            vec![vec![1.0], vec![0.5], vec![-0.7], vec![0.3], vec![-0.2]],
            vec![1.0, -1.0, -1.0, 1.0, 1.0],
            5.0,
        )
        .unwrap();
        let theta = minimize_on_ball(&task).unwrap();
        assert!(theta[0].abs() < 5.0);
        assert!(kkt_residual(&task, &theta) < ORACLE_TOL);
        assert!(task.loss(&theta) <= grid_min(&task) + 1e-12);
    }

    #[test]
    fn oracle_duplicated_points() {
        let x = vec![0.6, -0.8, 1.0];
        let task = ConvexTask::new(vec![x.clone(); 5], vec![-1.0; 5], 1.5).unwrap();
        let pointwise = softplus(-1.5 * norm2(&x));
        let o = oracle_best_fixed(&task, 7).unwrap();
        assert!((o - 7.0 * pointwise).abs() < 1e-10);
    }

    #[test]
    fn oracle_symmetric_is_ln2() {
        let task = ConvexTask::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![1.0, -1.0], 3.0).unwrap();
        let theta = minimize_on_ball(&task).unwrap();
        assert!(theta[0].abs() < 1e-9);
        let o = oracle_best_fixed(&task, 4).unwrap();
        assert!((o - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn concentration_examples() {
        let c = concentration_term(100, 0.5).unwrap();
        assert!((c - 2.0 * (0.02 * 2f64.ln()).sqrt()).abs() < 1e-15);
        assert!((c - 0.2355).abs() < 1e-4);
        assert!(concentration_term(100, 1.0).is_err());
    }

    #[test]
    fn scaled_losses_stay_in_unit_interval() {
        let f = ConvexFamily::default();
        let scale = ConvexTask::unit_scale(f.radius, f.max_input_norm());
        let mut rng = RngStream::new(1, 1);
        let tasks = TrialTasks {
            mean: f.unit_vector(&mut rng),
            dir: f.unit_vector(&mut rng),
        };
        let (p, y) = f.sample(&tasks, 1, 200, &mut rng);
        let t = ConvexTask::new(p, y, f.radius).unwrap().with_scale(scale);
        assert!(t.loss_upper_bound() <= 1.0 + 1e-12);
    }

    #[test]
    fn small_error_bound_run() {
        let f = ConvexFamily {
            holdout: 500,
            ..ConvexFamily::default()
        };
        let r = check_error_bound(&f, 4, 0.1, 30, 3).unwrap();
        assert_eq!(r.lhs.len(), 4);
        assert!((0.0..=1.0).contains(&r.violation_fraction));
        assert!(r.lhs.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(r, check_error_bound(&f, 4, 0.1, 30, 3).unwrap());
    }

    #[test]
    fn stability_identities() {
        let setup = small_probe_setup(4, None, 0.9).unwrap();
        let noop = stability_probe(&setup, &[(3, 3)]).unwrap();
        assert_eq!(noop.global_eps, 0.0);
        assert!(noop.per_task_eps.iter().all(|e| *e == 0.0));
        let p = stability_probe_random(&setup, 3, 1).unwrap();
        let oplus: f64 = p.gamma.iter().zip(&p.per_task_eps).map(|(g, e)| g * e).sum();
        assert_eq!(p.eps_oplus, oplus);
        assert!(p.global_eps > 0.0 && p.drift >= 0.0);
        let degenerate = small_probe_setup(4, Some(1.0), 0.0).unwrap();
        let d = stability_probe_random(&degenerate, 3, 1).unwrap();
        assert_eq!(d.global_eps, d.per_task_eps[0]);
    }

    #[test]
    fn mixing_trivial_cases() {
        let u = vec![vec![0.3, -1.0, 2.0]];
        let v = vec![vec![1.3, 0.0, -2.0]];
        let (l, r) = mixing_sides(&[1.0], &u, &v, 2);
        assert!((l - r).abs() < 1e-15);
        let u2 = vec![vec![0.3, -1.0], vec![2.0, 0.5]];
        let (l, r) = mixing_sides(&[0.4, 0.6], &u2, &u2, 0);
        assert_eq!((l, r), (0.0, 0.0));
    }

    #[test]
    fn mixing_counterexample_is_reported() {
        // margins (-10, 10) against (-10, 8): the mixed margin moves by 1
        // while each learner's loss barely moves
        let u = vec![vec![-5.0, 5.0], vec![5.0, -5.0]];
        let v = vec![vec![-5.0, 5.0], vec![4.0, -4.0]];
        let (l, r) = mixing_sides(&[0.5, 0.5], &u, &v, 0);
        assert!(l > r, "lhs {l} rhs {r}");
        let report = check_mixing_lemma(500, 1);
        assert_eq!(report.trials, 500);
        assert!(report.worst_case.is_some());
    }
}
