//! Coupled density-estimation reward model.
//!
//! A frozen ensemble of K randomly initialized target networks defines
//! per-input first and second moments (μ, B₂). Two predictors — one fit on
//! expert data, one on behavioral data — are distilled toward randomly chosen
//! ensemble members; their deviation from μ, blended with an occurrence-count
//! correction, yields per-source bonuses whose weighted difference is the
//! reward. A single-predictor baseline mode reproduces plain random expert
//! distillation for ablations.

use crate::math::{r, sq_dist, Matrix, Real};
use crate::nn::{Activation, Mlp, MlpSpec, ParamStore};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Denominator floor below which a dimension's occurrence radicand is zeroed.
pub const DEGENERATE_DENOM: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GFn {
    Linear,
    Exp,
}

impl GFn {
    #[inline(always)]
    pub fn apply<R: Real>(self, x: R) -> R {
        match self {
            GFn::Linear => x,
            GFn::Exp => x.exp(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardMode {
    Coupled,
    RedBaseline,
}

/// Reward hyperparameters and network sizing.
#[derive(Clone, Debug)]
pub struct RewardConfig {
    pub zeta: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub g: GFn,
    pub mode: RewardMode,
    /// Ensemble size.
    pub k: usize,
    /// Embedding width of predictors and targets.
    pub p: usize,
    /// Hidden width of the two-hidden-layer predictor/target nets.
    pub hidden: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            zeta: 0.8,
            sigma: 1.0,
            alpha: 0.9,
            g: GFn::Linear,
            mode: RewardMode::Coupled,
            k: 5,
            p: 64,
            hidden: 512,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.zeta && self.zeta <= 1.0) {
            return Err(Error::Config(format!("zeta {} outside (0,1]", self.zeta)));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config(format!("sigma {} negative", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.k == 0 || self.p == 0 || self.hidden == 0 {
            return Err(Error::Config("k, p, hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Every intermediate of one reward evaluation, recomputable into the final
/// value: `reward = ζ·g(−σ·b_φ) − (1−ζ)·g(−σ·b_ψ)`.
#[derive(Clone, Debug)]
pub struct RewardBreakdown<R> {
    pub reward: R,
    pub b_phi: R,
    pub b_psi: R,
    pub l2_phi: R,
    pub l2_psi: R,
    pub eps_phi: R,
    pub eps_psi: R,
    pub mu: Vec<R>,
    pub b2: Vec<R>,
}

/// Batch-level reward diagnostics for the metrics stream.
#[derive(Clone, Copy, Debug, Default)]
pub struct RewardDiag {
    pub mean_b_phi: f64,
    pub mean_b_psi: f64,
    pub mean_reward: f64,
}

/// Frozen K-member target ensemble plus the expert and behavioral predictors.
pub struct CdredModel<R> {
    targets: Vec<Mlp<R>>,
    target_seeds: Vec<u64>,
    expert: Mlp<R>,
    behavioral: Mlp<R>,
    cfg: RewardConfig,
    input_width: usize,
}

fn predictor_spec(latent: usize, action: usize, hidden: usize, p: usize) -> MlpSpec {
    MlpSpec::new(latent + action)
        .normed(hidden, Activation::Mish)
        .normed(hidden, Activation::Mish)
        .linear(p)
}

impl<R: Real> CdredModel<R> {
    /// Builds predictors and K frozen targets. Member `i` of the ensemble is
    /// initialized from its own seed (recorded for checkpointing).
    pub fn init(latent: usize, action: usize, cfg: RewardConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = predictor_spec(latent, action, cfg.hidden, cfg.p);
        let expert = Mlp::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(seed ^ 0xE0))?;
        let behavioral = Mlp::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(seed ^ 0xB0))?;
        let target_seeds: Vec<u64> = (0..cfg.k)
            .map(|i| seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(i as u64 + 1))
            .collect();
        let targets = target_seeds
            .iter()
            .map(|&s| {
                let mut t = Mlp::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(s))?;
                t.freeze();
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CdredModel {
            targets,
            target_seeds,
            expert,
            behavioral,
            cfg,
            input_width: latent + action,
        })
    }

    /// Assembles a model from explicit networks (stub targets in tests).
    pub fn with_networks(
        targets: Vec<Mlp<R>>,
        expert: Mlp<R>,
        behavioral: Mlp<R>,
        mut cfg: RewardConfig,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Config("need at least one target network".into()));
        }
        let hash = targets[0].spec().hash64();
        if targets.iter().any(|t| t.spec().hash64() != hash) {
            return Err(Error::Config("target networks must share one architecture".into()));
        }
        let input_width = targets[0].input_width();
        let p = targets[0].output_width();
        if expert.input_width() != input_width
            || behavioral.input_width() != input_width
            || expert.output_width() != p
            || behavioral.output_width() != p
        {
            return Err(Error::shape(
                "predictor network widths",
                format!("in {input_width}, out {p}"),
                format!(
                    "expert in {} out {}, behavioral in {} out {}",
                    expert.input_width(),
                    expert.output_width(),
                    behavioral.input_width(),
                    behavioral.output_width()
                ),
            ));
        }
        cfg.k = targets.len();
        cfg.p = p;
        let mut targets = targets;
        for t in &mut targets {
            t.freeze();
        }
        Ok(CdredModel {
            target_seeds: vec![0; targets.len()],
            targets,
            expert,
            behavioral,
            cfg,
            input_width,
        })
    }

    pub fn config(&self) -> &RewardConfig {
        &self.cfg
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn expert_predictor(&self) -> &Mlp<R> {
        &self.expert
    }

    pub fn behavioral_predictor(&self) -> &Mlp<R> {
        &self.behavioral
    }

    pub fn expert_predictor_mut(&mut self) -> &mut Mlp<R> {
        &mut self.expert
    }

    pub fn behavioral_predictor_mut(&mut self) -> &mut Mlp<R> {
        &mut self.behavioral
    }

    pub fn targets(&self) -> &[Mlp<R>] {
        &self.targets
    }

    pub fn target_seeds(&self) -> &[u64] {
        &self.target_seeds
    }

    fn check_input(&self, za: &Matrix<R>) -> Result<()> {
        if za.cols() != self.input_width {
            return Err(Error::shape("reward input", self.input_width, za.cols()));
        }
        Ok(())
    }

    /// Per-row ensemble mean and mean-of-squares over the K target outputs.
    pub fn target_moments(&self, za: &Matrix<R>) -> Result<(Matrix<R>, Matrix<R>)> {
        self.check_input(za)?;
        let p = self.cfg.p;
        let mut mu = Matrix::zeros(za.rows(), p);
        let mut b2 = Matrix::zeros(za.rows(), p);
        for t in &self.targets {
            let out = t.eval(za)?;
            for ((m, s), &o) in mu
                .data_mut()
                .iter_mut()
                .zip(b2.data_mut().iter_mut())
                .zip(out.data())
            {
                *m += o;
                *s += o * o;
            }
        }
        let inv_k = r::<R>(1.0 / self.cfg.k as f64);
        mu.scale(inv_k);
        b2.scale(inv_k);
        Ok((mu, b2))
    }

    /// Elementwise mean of the K target outputs for one input.
    pub fn target_mean(&self, za: &[R]) -> Result<Vec<R>> {
        let (mu, _) = self.target_moments(&Matrix::from_row(za))?;
        Ok(mu.row(0).to_vec())
    }

    /// Elementwise mean of squared target outputs for one input.
    pub fn target_second_moment(&self, za: &[R]) -> Result<Vec<R>> {
        let (_, b2) = self.target_moments(&Matrix::from_row(za))?;
        Ok(b2.row(0).to_vec())
    }

    pub fn expert_output(&self, za: &Matrix<R>) -> Result<Matrix<R>> {
        self.check_input(za)?;
        self.expert.eval(za)
    }

    pub fn behavioral_output(&self, za: &Matrix<R>) -> Result<Matrix<R>> {
        self.check_input(za)?;
        self.behavioral.eval(za)
    }

    /// Full reward evaluation for one latent/action pair with all intermediate
    /// statistics. Coupled mode only.
    pub fn reward(&self, za: &[R]) -> Result<RewardBreakdown<R>> {
        if self.cfg.mode != RewardMode::Coupled {
            return Err(Error::Mode(
                "reward() requires coupled mode; use red_reward() for the baseline".into(),
            ));
        }
        let input = Matrix::from_row(za);
        let (mu, b2) = self.target_moments(&input)?;
        let f_phi = self.expert.eval(&input)?;
        let f_psi = self.behavioral.eval(&input)?;
        Ok(self.breakdown_row(f_phi.row(0), f_psi.row(0), mu.row(0), b2.row(0)))
    }

    fn breakdown_row(&self, f_phi: &[R], f_psi: &[R], mu: &[R], b2: &[R]) -> RewardBreakdown<R> {
        let l2_phi = sq_dist(f_phi, mu);
        let l2_psi = sq_dist(f_psi, mu);
        let eps_phi = epsilon_from_moments(f_phi, mu, b2);
        let eps_psi = epsilon_from_moments(f_psi, mu, b2);
        let alpha = r::<R>(self.cfg.alpha);
        let one = R::one();
        let b_phi = alpha * l2_phi + (one - alpha) * eps_phi;
        let b_psi = alpha * l2_psi + (one - alpha) * eps_psi;
        RewardBreakdown {
            reward: self.combine(b_phi, b_psi),
            b_phi,
            b_psi,
            l2_phi,
            l2_psi,
            eps_phi,
            eps_psi,
            mu: mu.to_vec(),
            b2: b2.to_vec(),
        }
    }

    /// `ζ·g(−σ·b_φ) − (1−ζ)·g(−σ·b_ψ)`.
    pub fn combine(&self, b_phi: R, b_psi: R) -> R {
        let zeta = r::<R>(self.cfg.zeta);
        let sigma = r::<R>(self.cfg.sigma);
        let g = self.cfg.g;
        zeta * g.apply(-sigma * b_phi) - (R::one() - zeta) * g.apply(-sigma * b_psi)
    }

    /// Bonus `α‖f−μ‖² + (1−α)ε` for the chosen predictor on one input.
    pub fn bonus(&self, za: &[R], expert_side: bool) -> Result<R> {
        let input = Matrix::from_row(za);
        let (mu, b2) = self.target_moments(&input)?;
        let f = if expert_side {
            self.expert.eval(&input)?
        } else {
            self.behavioral.eval(&input)?
        };
        let l2 = sq_dist(f.row(0), mu.row(0));
        let eps = epsilon_from_moments(f.row(0), mu.row(0), b2.row(0));
        let alpha = r::<R>(self.cfg.alpha);
        Ok(alpha * l2 + (R::one() - alpha) * eps)
    }

    /// `√(mean radicand)` occurrence correction for the chosen predictor.
    pub fn epsilon_correction(&self, za: &[R], expert_side: bool) -> Result<R> {
        let input = Matrix::from_row(za);
        let (mu, b2) = self.target_moments(&input)?;
        let f = if expert_side {
            self.expert.eval(&input)?
        } else {
            self.behavioral.eval(&input)?
        };
        Ok(epsilon_from_moments(f.row(0), mu.row(0), b2.row(0)))
    }

    /// Clamped occurrence statistic `y` (the square of the correction term).
    pub fn occurrence_estimator(&self, za: &[R], expert_side: bool) -> Result<R> {
        let input = Matrix::from_row(za);
        let (mu, b2) = self.target_moments(&input)?;
        let f = if expert_side {
            self.expert.eval(&input)?
        } else {
            self.behavioral.eval(&input)?
        };
        Ok(occurrence_radicand(f.row(0), mu.row(0), b2.row(0), true))
    }

    /// Unclamped variant of the occurrence statistic, exposed for diagnostics:
    /// unbiasedness of `y` only holds without the clamp.
    pub fn occurrence_estimator_raw(&self, za: &[R], expert_side: bool) -> Result<R> {
        let input = Matrix::from_row(za);
        let (mu, b2) = self.target_moments(&input)?;
        let f = if expert_side {
            self.expert.eval(&input)?
        } else {
            self.behavioral.eval(&input)?
        };
        Ok(occurrence_radicand(f.row(0), mu.row(0), b2.row(0), false))
    }

    /// Baseline reward `exp(−σ · mean_k ‖f_φ − f_θ̄k‖²)`. Baseline mode only.
    pub fn red_reward(&self, za: &[R]) -> Result<R> {
        if self.cfg.mode != RewardMode::RedBaseline {
            return Err(Error::Mode(
                "red_reward() requires red-baseline mode".into(),
            ));
        }
        let input = Matrix::from_row(za);
        Ok(self.red_reward_batch(&input)?[0])
    }

    fn red_reward_batch(&self, za: &Matrix<R>) -> Result<Vec<R>> {
        self.check_input(za)?;
        let f_phi = self.expert.eval(za)?;
        let mut dev = vec![R::zero(); za.rows()]; // mean over K of squared L2
        for t in &self.targets {
            let out = t.eval(za)?;
            for (i, d) in dev.iter_mut().enumerate() {
                *d += sq_dist(f_phi.row(i), out.row(i));
            }
        }
        let inv_k = r::<R>(1.0 / self.cfg.k as f64);
        let sigma = r::<R>(self.cfg.sigma);
        Ok(dev
            .into_iter()
            .map(|d| (-sigma * d * inv_k).exp())
            .collect())
    }

    /// Reward per batch row under the active mode; the planner's hot path.
    pub fn reward_batch(&self, za: &Matrix<R>) -> Result<Vec<R>> {
        match self.cfg.mode {
            RewardMode::RedBaseline => self.red_reward_batch(za),
            RewardMode::Coupled => {
                let (mu, b2) = self.target_moments(za)?;
                let f_phi = self.expert.eval(za)?;
                let f_psi = self.behavioral.eval(za)?;
                let alpha = r::<R>(self.cfg.alpha);
                let one = R::one();
                Ok((0..za.rows())
                    .map(|i| {
                        let b_phi = alpha * sq_dist(f_phi.row(i), mu.row(i))
                            + (one - alpha) * epsilon_from_moments(f_phi.row(i), mu.row(i), b2.row(i));
                        let b_psi = alpha * sq_dist(f_psi.row(i), mu.row(i))
                            + (one - alpha) * epsilon_from_moments(f_psi.row(i), mu.row(i), b2.row(i));
                        self.combine(b_phi, b_psi)
                    })
                    .collect())
            }
        }
    }

    /// Mean bonus/reward statistics over a batch, for the diagnostics stream.
    pub fn batch_diagnostics(&self, za: &Matrix<R>) -> Result<RewardDiag> {
        let (mu, b2) = self.target_moments(za)?;
        let f_phi = self.expert.eval(za)?;
        let f_psi = self.behavioral.eval(za)?;
        let alpha = r::<R>(self.cfg.alpha);
        let one = R::one();
        let mut diag = RewardDiag::default();
        for i in 0..za.rows() {
            let b_phi = alpha * sq_dist(f_phi.row(i), mu.row(i))
                + (one - alpha) * epsilon_from_moments(f_phi.row(i), mu.row(i), b2.row(i));
            let b_psi = alpha * sq_dist(f_psi.row(i), mu.row(i))
                + (one - alpha) * epsilon_from_moments(f_psi.row(i), mu.row(i), b2.row(i));
            diag.mean_b_phi += b_phi.f64();
            diag.mean_b_psi += b_psi.f64();
            diag.mean_reward += match self.cfg.mode {
                RewardMode::Coupled => self.combine(b_phi, b_psi).f64(),
                RewardMode::RedBaseline => {
                    // baseline reward ignores the bonuses
                    self.red_reward_batch(&Matrix::from_row(za.row(i)))?[0].f64()
                }
            };
        }
        let n = za.rows().max(1) as f64;
        diag.mean_b_phi /= n;
        diag.mean_b_psi /= n;
        diag.mean_reward /= n;
        Ok(diag)
    }

    /// Distillation loss (coupled objective): per unroll step `t`,
    /// `λᵗ·[mean‖f_φ−f_θ̄k‖² over expert rows + mean‖f_ψ−f_θ̄k‖² over
    /// behavioral rows]`, summed over the horizon with one shared target
    /// index `k`. Behavioral side is omitted in baseline mode (pass `None`).
    /// Latents are treated as constants: gradients reach only the predictors.
    pub fn distillation_loss(
        &self,
        expert_za: &[Matrix<R>],
        behavioral_za: Option<&[Matrix<R>]>,
        lambda: f64,
        target_index: usize,
    ) -> Result<R> {
        let (loss, _, _) = self.distillation_loss_impl(expert_za, behavioral_za, lambda, target_index, false)?;
        Ok(loss)
    }

    /// Loss plus parameter gradients for both predictors.
    pub fn distillation_loss_and_grads(
        &self,
        expert_za: &[Matrix<R>],
        behavioral_za: Option<&[Matrix<R>]>,
        lambda: f64,
        target_index: usize,
    ) -> Result<(R, ParamStore<R>, ParamStore<R>)> {
        let (loss, ge, gb) =
            self.distillation_loss_impl(expert_za, behavioral_za, lambda, target_index, true)?;
        Ok((loss, ge.unwrap(), gb.unwrap()))
    }

    #[allow(clippy::type_complexity)]
    fn distillation_loss_impl(
        &self,
        expert_za: &[Matrix<R>],
        behavioral_za: Option<&[Matrix<R>]>,
        lambda: f64,
        target_index: usize,
        with_grads: bool,
    ) -> Result<(R, Option<ParamStore<R>>, Option<ParamStore<R>>)> {
        if target_index >= self.targets.len() {
            return Err(Error::Config(format!(
                "target index {target_index} out of range [0,{})",
                self.targets.len()
            )));
        }
        if let Some(beh) = behavioral_za {
            if beh.len() != expert_za.len() {
                return Err(Error::Contract(format!(
                    "horizon mismatch: expert {} vs behavioral {}",
                    expert_za.len(),
                    beh.len()
                )));
            }
        }
        let target = &self.targets[target_index];
        let mut loss = R::zero();
        let mut grads_e = if with_grads {
            Some(self.expert.params().zeros_like())
        } else {
            None
        };
        let mut grads_b = if with_grads {
            Some(self.behavioral.params().zeros_like())
        } else {
            None
        };
        let mut run_side = |net: &Mlp<R>,
                            grads: Option<&mut ParamStore<R>>,
                            zas: &[Matrix<R>]|
         -> Result<R> {
            let mut side_loss = R::zero();
            let mut grads = grads;
            for (t, za) in zas.iter().enumerate() {
                if za.rows() == 0 {
                    continue;
                }
                self.check_input(za)?;
                let weight = r::<R>(lambda.powi(t as i32));
                if weight == R::zero() {
                    continue;
                }
                let c = target.eval(za)?;
                let scale = r::<R>(1.0 / za.rows() as f64);
                let (f, cache) = net.forward(za, crate::nn::Mode::Train, None)?;
                let mut sq = R::zero();
                for i in 0..za.rows() {
                    sq += sq_dist(f.row(i), c.row(i));
                }
                side_loss += weight * scale * sq;
                if let Some(g) = grads.as_deref_mut() {
                    let mut up = Matrix::zeros(f.rows(), f.cols());
                    let two = r::<R>(2.0);
                    for ((u, &fv), &cv) in
                        up.data_mut().iter_mut().zip(f.data()).zip(c.data())
                    {
                        *u = two * weight * scale * (fv - cv);
                    }
                    net.backward_into(&cache, &up, g)?;
                }
            }
            Ok(side_loss)
        };
        loss += run_side(&self.expert, grads_e.as_mut(), expert_za)?;
        if let Some(beh) = behavioral_za {
            loss += run_side(&self.behavioral, grads_b.as_mut(), beh)?;
        }
        Ok((loss, grads_e, grads_b))
    }

    pub fn cast<T: Real>(&self) -> CdredModel<T> {
        CdredModel {
            targets: self.targets.iter().map(|t| t.cast()).collect(),
            target_seeds: self.target_seeds.clone(),
            expert: self.expert.cast(),
            behavioral: self.behavioral.cast(),
            cfg: self.cfg.clone(),
            input_width: self.input_width,
        }
    }
}

/// Per-dimension radicand `([f]² − μ²)/(B₂ − μ²)` averaged over dimensions.
/// Dimensions with a near-degenerate denominator contribute zero; with
/// `clamp`, each radicand is clipped to `[0,1]` (the true quantity 1/n lies
/// in (0,1]).
fn occurrence_radicand<R: Real>(f: &[R], mu: &[R], b2: &[R], clamp: bool) -> R {
    let mut acc = R::zero();
    for ((&fv, &mv), &bv) in f.iter().zip(mu).zip(b2) {
        let denom = bv - mv * mv;
        if denom.f64() < DEGENERATE_DENOM {
            continue;
        }
        let mut y = (fv * fv - mv * mv) / denom;
        if clamp {
            y = y.max(R::zero()).min(R::one());
        }
        acc += y;
    }
    acc / r(f.len() as f64)
}

fn epsilon_from_moments<R: Real>(f: &[R], mu: &[R], b2: &[R]) -> R {
    occurrence_radicand(f, mu, b2, true).sqrt()
}
