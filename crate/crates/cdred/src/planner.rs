//! Derivative-free action-sequence refinement over latent rollouts.
//!
//! Each planning call scores N Gaussian-sampled sequences plus N_π
//! policy-guided sequences under the model's reward and terminal value, then
//! re-fits the sequence distribution to the exponentially weighted elites.
//! The planner sees the world model through [`LatentSystem`] so tests can
//! substitute analytic stubs.

use crate::math::{Matrix, Real};
use crate::model::{HeadSet, QReduce, WorldModel};
use crate::reward::CdredModel;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Batched latent-space interface the planner rolls out against.
pub trait LatentSystem {
    fn latent_width(&self) -> usize;
    fn action_width(&self) -> usize;
    fn encode(&self, obs: &[f32]) -> Result<Vec<f32>>;
    fn step_batch(&self, z: &Matrix<f32>, a: &Matrix<f32>) -> Result<Matrix<f32>>;
    fn reward_batch(&self, z: &Matrix<f32>, a: &Matrix<f32>) -> Result<Vec<f32>>;
    /// Stochastic policy actions for each latent row.
    fn policy_actions(&self, z: &Matrix<f32>, rng: &mut ChaCha8Rng) -> Result<Matrix<f32>>;
    /// Ensemble value used for the terminal term.
    fn q_batch(&self, z: &Matrix<f32>, a: &Matrix<f32>) -> Result<Vec<f32>>;
}

/// World model + reward model bundled behind [`LatentSystem`].
pub struct AgentView<'a> {
    pub model: &'a WorldModel<f32>,
    pub reward: &'a CdredModel<f32>,
}

impl LatentSystem for AgentView<'_> {
    fn latent_width(&self) -> usize {
        self.model.config().latent
    }

    fn action_width(&self) -> usize {
        self.model.config().action
    }

    fn encode(&self, obs: &[f32]) -> Result<Vec<f32>> {
        Ok(self.model.encode(obs)?.0)
    }

    fn step_batch(&self, z: &Matrix<f32>, a: &Matrix<f32>) -> Result<Matrix<f32>> {
        self.model.latent_step_batch(z, a)
    }

    fn reward_batch(&self, z: &Matrix<f32>, a: &Matrix<f32>) -> Result<Vec<f32>> {
        self.reward.reward_batch(&Matrix::hcat(z, a))
    }

    fn policy_actions(&self, z: &Matrix<f32>, rng: &mut ChaCha8Rng) -> Result<Matrix<f32>> {
        self.model.policy_actions_batch(z, true, rng)
    }

    fn q_batch(&self, z: &Matrix<f32>, a: &Matrix<f32>) -> Result<Vec<f32>> {
        self.model.q_scalar_batch(z, a, HeadSet::Online, QReduce::Mean)
    }
}

#[derive(Clone, Debug)]
pub struct PlannerConfig {
    pub horizon: usize,
    /// Gaussian-sampled candidate count N.
    pub samples: usize,
    /// Policy-guided candidate count N_π.
    pub policy_samples: usize,
    /// Refinement iterations J.
    pub iterations: usize,
    pub elites: usize,
    pub temperature: f64,
    pub sigma_init: f64,
    pub sigma_floor: f64,
    pub gamma: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 3,
            samples: 512,
            policy_samples: 24,
            iterations: 6,
            elites: 64,
            temperature: 0.5,
            sigma_init: 1.0,
            sigma_floor: 0.05,
            gamma: 0.99,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.iterations == 0 {
            return Err(Error::Config("planner horizon/iterations must be positive".into()));
        }
        if self.samples + self.policy_samples == 0 {
            return Err(Error::Config("planner needs at least one candidate".into()));
        }
        if self.elites == 0 || self.elites > self.samples + self.policy_samples {
            return Err(Error::Config(format!(
                "elite count {} outside 1..={}",
                self.elites,
                self.samples + self.policy_samples
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Per-timestep action-sequence distribution parameters refined in place.
#[derive(Clone, Debug)]
pub struct PlanSolution {
    pub mu: Matrix<f32>,
    pub sigma: Matrix<f32>,
}

impl PlanSolution {
    pub fn cold(horizon: usize, action: usize, sigma_init: f64) -> Self {
        PlanSolution {
            mu: Matrix::zeros(horizon, action),
            sigma: Matrix::filled(horizon, action, sigma_init as f32),
        }
    }

    /// Warm start for the next step: shift the mean one step left and
    /// re-initialize the final step at zero.
    pub fn shifted(&self, sigma_init: f64) -> Self {
        let (h, a) = self.mu.shape();
        let mut mu = Matrix::zeros(h, a);
        for t in 1..h {
            let src = self.mu.row(t).to_vec();
            mu.row_mut(t - 1).copy_from_slice(&src);
        }
        PlanSolution {
            mu,
            sigma: Matrix::filled(h, a, sigma_init as f32),
        }
    }
}

/// Per-call planning telemetry.
#[derive(Clone, Debug, Default)]
pub struct PlanTelemetry {
    pub elite_mean: Vec<f64>,
    pub elite_max: Vec<f64>,
    pub final_sigma_norm: f64,
}

pub struct Planner {
    pub cfg: PlannerConfig,
}

impl Planner {
    pub fn new(cfg: PlannerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Planner { cfg })
    }

    /// Discounted return of one action sequence from `z0`:
    /// `Σ_{t<H} γᵗ·R(z_t,a_t) + γᴴ·Q(z_H, a_H)` with `a_H` freshly sampled
    /// from the policy prior.
    pub fn estimate_return<S: LatentSystem>(
        &self,
        sys: &S,
        z0: &[f32],
        actions: &[Vec<f32>],
        rng: &mut ChaCha8Rng,
    ) -> Result<f32> {
        let mut step_mats = Vec::with_capacity(actions.len());
        for a in actions {
            step_mats.push(Matrix::from_row(a));
        }
        let returns = self.rollout_returns(sys, z0, &step_mats, 1, rng)?;
        Ok(returns[0])
    }

    /// Batched rollout scoring: `per_step[t]` holds the t-th action of every
    /// candidate as a row.
    fn rollout_returns<S: LatentSystem>(
        &self,
        sys: &S,
        z0: &[f32],
        per_step: &[Matrix<f32>],
        candidates: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f32>> {
        let mut z = Matrix::zeros(candidates, z0.len());
        for i in 0..candidates {
            z.row_mut(i).copy_from_slice(z0);
        }
        let mut returns = vec![0.0f32; candidates];
        let mut discount = 1.0f32;
        for a_t in per_step {
            let r = sys.reward_batch(&z, a_t)?;
            for (acc, rv) in returns.iter_mut().zip(&r) {
                *acc += discount * rv;
            }
            z = sys.step_batch(&z, a_t)?;
            discount *= self.cfg.gamma as f32;
        }
        let a_terminal = sys.policy_actions(&z, rng)?;
        let q = sys.q_batch(&z, &a_terminal)?;
        for (acc, qv) in returns.iter_mut().zip(&q) {
            *acc += discount * qv;
        }
        Ok(returns)
    }

    /// One full planning call. Returns the action to execute, the refined
    /// solution (for warm starting), and telemetry.
    pub fn plan<S: LatentSystem>(
        &self,
        sys: &S,
        obs: &[f32],
        warm_start: Option<&PlanSolution>,
        deterministic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f32>, PlanSolution, PlanTelemetry)> {
        let sol = match warm_start {
            Some(prev) => prev.shifted(self.cfg.sigma_init),
            None => PlanSolution::cold(self.cfg.horizon, sys.action_width(), self.cfg.sigma_init),
        };
        self.plan_from(sys, obs, sol, deterministic, rng)
    }

    /// Planning from an explicit initial solution.
    pub fn plan_from<S: LatentSystem>(
        &self,
        sys: &S,
        obs: &[f32],
        initial: PlanSolution,
        deterministic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f32>, PlanSolution, PlanTelemetry)> {
        let cfg = &self.cfg;
        let action = sys.action_width();
        let h = cfg.horizon;
        let n = cfg.samples;
        let n_pi = cfg.policy_samples;
        let total = n + n_pi;
        let z0 = sys.encode(obs)?;

        // The floor never inflates σ beyond its initial value, so a caller
        // passing σ = 0 gets fully degenerate sampling at every iteration.
        let floors: Vec<f32> = initial
            .sigma
            .data()
            .iter()
            .map(|&s| (cfg.sigma_floor as f32).min(s))
            .collect();
        let mut sol = initial;
        let mut telemetry = PlanTelemetry::default();

        for _ in 0..cfg.iterations {
            // candidate actions per step: first N sampled, then N_π from the policy
            let mut per_step: Vec<Matrix<f32>> =
                (0..h).map(|_| Matrix::zeros(total, action)).collect();
            for (t, step) in per_step.iter_mut().enumerate() {
                for i in 0..n {
                    for j in 0..action {
                        let eps: f64 = rng.sample(StandardNormal);
                        let v = sol.mu.get(t, j) + sol.sigma.get(t, j) * eps as f32;
                        step.set(i, j, v.clamp(-1.0, 1.0));
                    }
                }
            }
            if n_pi > 0 {
                let mut z_pi = Matrix::zeros(n_pi, z0.len());
                for i in 0..n_pi {
                    z_pi.row_mut(i).copy_from_slice(&z0);
                }
                for step in per_step.iter_mut() {
                    let a_pi = sys.policy_actions(&z_pi, rng)?;
                    for i in 0..n_pi {
                        for j in 0..action {
                            step.set(n + i, j, a_pi.get(i, j).clamp(-1.0, 1.0));
                        }
                    }
                    let a_rows: Vec<Vec<f32>> =
                        (0..n_pi).map(|i| step.row(n + i).to_vec()).collect();
                    z_pi = sys.step_batch(&z_pi, &Matrix::from_rows(&a_rows))?;
                }
            }

            let returns = self.rollout_returns(sys, &z0, &per_step, total, rng)?;
            let mut order: Vec<usize> = (0..total).filter(|&i| returns[i].is_finite()).collect();
            if order.is_empty() {
                return Err(Error::Numeric(format!(
                    "all {total} planner rollouts produced non-finite returns"
                )));
            }
            order.sort_by(|&a, &b| {
                returns[b]
                    .partial_cmp(&returns[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let elites = &order[..cfg.elites.min(order.len())];

            // exponentially weighted moments of the elite set
            let max_ret = returns[elites[0]] as f64;
            let mut weights = Vec::with_capacity(elites.len());
            let mut wsum = 0.0f64;
            for &e in elites {
                let w = ((returns[e] as f64 - max_ret) / cfg.temperature).exp();
                weights.push(w);
                wsum += w;
            }
            telemetry.elite_mean.push(
                elites.iter().map(|&e| returns[e] as f64).sum::<f64>() / elites.len() as f64,
            );
            telemetry.elite_max.push(max_ret);

            for t in 0..h {
                for j in 0..action {
                    let mut mean = 0.0f64;
                    for (&e, &w) in elites.iter().zip(&weights) {
                        mean += w * per_step[t].get(e, j) as f64;
                    }
                    mean /= wsum;
                    let mut var = 0.0f64;
                    for (&e, &w) in elites.iter().zip(&weights) {
                        let d = per_step[t].get(e, j) as f64 - mean;
                        var += w * d * d;
                    }
                    var /= wsum;
                    sol.mu.set(t, j, (mean as f32).clamp(-1.0, 1.0));
                    sol.sigma
                        .set(t, j, (var.sqrt() as f32).max(floors[t * action + j]));
                }
            }
        }

        telemetry.final_sigma_norm = crate::math::l2_norm(sol.sigma.data()).f64();
        let mut chosen = sol.mu.row(0).to_vec();
        if !deterministic {
            for (j, v) in chosen.iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                *v = (*v + sol.sigma.get(0, j) * eps as f32).clamp(-1.0, 1.0);
            }
        }
        Ok((chosen, sol, telemetry))
    }
}
