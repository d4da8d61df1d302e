//! Decoder-free latent world model: encoder, latent dynamics, a discrete-bin
//! Q ensemble with frozen target copies, and a stochastic squashed-Gaussian
//! policy prior.
//!
//! Training losses are split into two phases. `build_loss_context` computes
//! every stop-gradient quantity (consistency targets, TD targets, distillation
//! latents, policy-sample noise) as constants; `model_loss_and_grads` /
//! `policy_loss_and_grads` are then plain differentiable functions of the
//! parameters given that context, which is what makes the analytic gradients
//! directly checkable against finite differences.

use crate::math::{r, sq_dist, Matrix, Real};
use crate::nn::{Activation, Mlp, MlpSpec, Mode, ParamStore};
use crate::reward::CdredModel;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
const TANH_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSet {
    Online,
    Target,
}

/// Reduction over the Q ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QReduce {
    /// Mean of all heads (the default read).
    Mean,
    /// Mean of the two lowest heads (pessimistic TD bootstrap).
    MinPair,
}

/// Network sizing. Defaults follow the reference architecture; desk-scale
/// configurations shrink the widths.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub obs: usize,
    pub action: usize,
    pub latent: usize,
    pub enc_hidden: usize,
    pub hidden: usize,
    pub num_q: usize,
    pub bins: usize,
    pub simnorm_group: usize,
    pub q_dropout: f64,
    /// Bin range in symmetric-log space.
    pub vmin: f64,
    pub vmax: f64,
}

impl ModelConfig {
    pub fn new(obs: usize, action: usize) -> Self {
        ModelConfig {
            obs,
            action,
            latent: 512,
            enc_hidden: 256,
            hidden: 512,
            num_q: 5,
            bins: 101,
            simnorm_group: 8,
            q_dropout: 0.01,
            vmin: -10.0,
            vmax: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs == 0 || self.action == 0 {
            return Err(Error::Config("obs/action widths must be positive".into()));
        }
        if self.simnorm_group == 0 || self.latent % self.simnorm_group != 0 {
            return Err(Error::Config(format!(
                "latent width {} not divisible by simnorm group {}",
                self.latent, self.simnorm_group
            )));
        }
        if self.bins < 2 || self.num_q < 1 {
            return Err(Error::Config("need at least 2 bins and 1 Q head".into()));
        }
        if self.vmin >= self.vmax {
            return Err(Error::Config("vmin must be below vmax".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> ValueBins {
        ValueBins {
            bins: self.bins,
            vmin: self.vmin,
            vmax: self.vmax,
        }
    }
}

/// Symmetric-log transform used before binning scalar values.
pub fn symlog(v: f64) -> f64 {
    v.signum() * (1.0 + v.abs()).ln()
}

pub fn symexp(v: f64) -> f64 {
    v.signum() * (v.abs().exp() - 1.0)
}

/// Fixed uniform bin grid in symmetric-log space with two-hot encoding.
#[derive(Clone, Copy, Debug)]
pub struct ValueBins {
    pub bins: usize,
    pub vmin: f64,
    pub vmax: f64,
}

impl ValueBins {
    pub fn width(&self) -> f64 {
        (self.vmax - self.vmin) / (self.bins - 1) as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.vmin + i as f64 * self.width()
    }

    /// Scalar → mass on the two nearest bin centers (in transformed space).
    pub fn two_hot_encode<R: Real>(&self, v: R) -> Vec<R> {
        let y = symlog(v.f64()).clamp(self.vmin, self.vmax);
        let pos = (y - self.vmin) / self.width();
        let lo = (pos.floor() as usize).min(self.bins - 1);
        let hi = (lo + 1).min(self.bins - 1);
        let w_hi = pos - lo as f64;
        let mut out = vec![R::zero(); self.bins];
        out[lo] = r(1.0 - w_hi);
        out[hi] += r(w_hi);
        out
    }

    /// Expected bin center of a probability vector, mapped back through the
    /// inverse transform.
    pub fn two_hot_decode<R: Real>(&self, probs: &[R]) -> R {
        debug_assert_eq!(probs.len(), self.bins);
        let mut m = 0.0;
        for (i, p) in probs.iter().enumerate() {
            m += p.f64() * self.center(i);
        }
        r(symexp(m))
    }

    /// Softmax the logits, then decode.
    pub fn decode_logits<R: Real>(&self, logits: &[R]) -> R {
        let mut p = logits.to_vec();
        crate::math::softmax_inplace(&mut p);
        self.two_hot_decode(&p)
    }
}

/// Stochastic policy head output for one latent state.
#[derive(Clone, Debug)]
pub struct PolicyOutput<R> {
    pub mean: Vec<R>,
    pub log_std: Vec<R>,
    pub action: Vec<R>,
    pub log_prob: R,
}

/// A latent state: simplex-group-normalized vector.
#[derive(Clone, Debug)]
pub struct LatentState<R>(pub Vec<R>);

pub struct WorldModel<R> {
    enc: Mlp<R>,
    dynamics: Mlp<R>,
    qs: Vec<Mlp<R>>,
    q_targets: Vec<Mlp<R>>,
    policy: Mlp<R>,
    cfg: ModelConfig,
}

impl<R: Real> WorldModel<R> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let group = cfg.simnorm_group;
        let enc_spec = MlpSpec::new(cfg.obs)
            .normed(cfg.enc_hidden, Activation::Mish)
            .normed(cfg.latent, Activation::SimNorm { group });
        let dyn_spec = MlpSpec::new(cfg.latent + cfg.action)
            .normed(cfg.hidden, Activation::Mish)
            .normed(cfg.hidden, Activation::Mish)
            .normed(cfg.latent, Activation::SimNorm { group });
        let q_spec = MlpSpec::new(cfg.latent + cfg.action)
            .normed_dropout(cfg.hidden, Activation::Mish, cfg.q_dropout)
            .normed(cfg.hidden, Activation::Mish)
            .linear(cfg.bins);
        let pi_spec = MlpSpec::new(cfg.latent)
            .normed(cfg.hidden, Activation::Mish)
            .normed(cfg.hidden, Activation::Mish)
            .linear(2 * cfg.action);

        let rng = |tag: u64| -> ChaCha8Rng ChaCha8Rng::seed_from_u64(seed.wrapping_add(tag));
        let enc = Mlp::init(enc_spec, &mut rng(0x11))?;
        let dynamics = Mlp::init(dyn_spec, &mut rng(0x22))?;
        let qs: Vec<Mlp<R>> = (0..cfg.num_q)
            .map(|i| Mlp::init(q_spec.clone(), &mut rng(0x33 + i as u64)))
            .collect::<Result<_>>()?;
        let q_targets: Vec<Mlp<R>> = qs
            .iter()
            .map(|q| {
                let mut t = q.clone();
                t.freeze();
                t
            })
            .collect();
        let policy = Mlp::init(pi_spec, &mut rng(0x44))?;
        Ok(WorldModel {
            enc,
            dynamics,
            qs,
            q_targets,
            policy,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Mlp<R> {
        &self.enc
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp<R> {
        &mut self.enc
    }

    pub fn dynamics_net(&self) -> &Mlp<R> {
        &self.dynamics
    }

    pub fn dynamics_net_mut(&mut self) -> &mut Mlp<R> {
        &mut self.dynamics
    }

    pub fn q_heads(&self) -> &[Mlp<R>] {
        &self.qs
    }

    pub fn q_heads_mut(&mut self) -> &mut [Mlp<R>] {
        &mut self.qs
    }

    pub fn q_target_heads(&self) -> &[Mlp<R>] {
        &self.q_targets
    }

    pub fn q_target_heads_mut(&mut self) -> &mut [Mlp<R>] {
        &mut self.q_targets
    }

    pub fn policy_net(&self) -> &Mlp<R> {
        &self.policy
    }

    pub fn policy_net_mut(&mut self) -> &mut Mlp<R> {
        &mut self.policy
    }

    /// Soft-update every frozen target head toward its online head.
    pub fn soft_update_targets(&mut self, tau: f64) -> Result<()> {
        for (online, target) in self.qs.iter().zip(self.q_targets.iter_mut()) {
            crate::nn::soft_update(online.params(), target.params_mut(), r::<R>(tau))?;
        }
        Ok(())
    }

    pub fn encode_batch(&self, obs: &Matrix<R>) -> Result<Matrix<R>> {
        if obs.cols() != self.cfg.obs {
            return Err(Error::shape("encode input", self.cfg.obs, obs.cols()));
        }
        self.enc.eval(obs)
    }

    pub fn encode(&self, obs: &[R]) -> Result<LatentState<R>> {
        Ok(LatentState(
            self.encode_batch(&Matrix::from_row(obs))?.row(0).to_vec(),
        ))
    }

    pub fn latent_step_batch(&self, z: &Matrix<R>, a: &Matrix<R>) -> Result<Matrix<R>> {
        self.dynamics.eval(&Matrix::hcat(z, a))
    }

    pub fn latent_step(&self, z: &LatentState<R>, a: &[R]) -> Result<LatentState<R>> {
        let out = self.latent_step_batch(
            &Matrix::from_row(&z.0),
            &Matrix::from_row(a),
        )?;
        Ok(LatentState(out.row(0).to_vec()))
    }

    fn heads(&self, set: HeadSet) -> &[Mlp<R>] {
        match set {
            HeadSet::Online => &self.qs,
            HeadSet::Target => &self.q_targets,
        }
    }

    /// Per-row ensemble-reduced scalar value.
    pub fn q_scalar_batch(
        &self,
        z: &Matrix<R>,
        a: &Matrix<R>,
        set: HeadSet,
        reduce: QReduce,
    ) -> Result<Vec<R>> {
        let za = Matrix::hcat(z, a);
        let bins = self.cfg.bins();
        let heads = self.heads(set);
        let mut per_head: Vec<Vec<R>> = Vec::with_capacity(heads.len());
        for h in heads {
            let logits = h.eval(&za)?;
            per_head.push(
                (0..za.rows())
                    .map(|i| bins.decode_logits(logits.row(i)))
                    .collect(),
            );
        }
        let mut out = Vec::with_capacity(za.rows());
        let mut vals = vec![R::zero(); heads.len()];
        for i in 0..za.rows() {
            for (h, v) in per_head.iter().zip(vals.iter_mut()) {
                *v = h[i];
            }
            out.push(reduce_heads(&mut vals, reduce));
        }
        Ok(out)
    }

    /// Scalar value plus the head-averaged bin distribution for one pair.
    pub fn q_value(&self, z: &[R], a: &[R], set: HeadSet) -> Result<(R, Vec<R>)> {
        let za = Matrix::hcat(&Matrix::from_row(z), &Matrix::from_row(a));
        let bins = self.cfg.bins();
        let heads = self.heads(set);
        let mut mean_probs = vec![R::zero(); self.cfg.bins];
        let mut scalar = R::zero();
        for h in heads {
            let logits = h.eval(&za)?;
            let mut p = logits.row(0).to_vec();
            crate::math::softmax_inplace(&mut p);
            scalar += bins.two_hot_decode(&p);
            for (m, v) in mean_probs.iter_mut().zip(&p) {
                *m += *v;
            }
        }
        let inv = r::<R>(1.0 / heads.len() as f64);
        for m in &mut mean_probs {
            *m *= inv;
        }
        Ok((scalar * inv, mean_probs))
    }

    /// Policy head forward: split into mean and clamped log-std.
    fn policy_params(&self, z: &Matrix<R>) -> Result<(Matrix<R>, Matrix<R>)> {
        let out = self.policy.eval(z)?;
        let (mean, log_std_raw) = out.hsplit(self.cfg.action);
        let log_std = log_std_raw.map(|v| v.max(r(LOG_STD_MIN)).min(r(LOG_STD_MAX)));
        Ok((mean, log_std))
    }

    /// Batched stochastic action sampling (planner/TD hot path).
    pub fn policy_actions_batch(
        &self,
        z: &Matrix<R>,
        stochastic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Matrix<R>> {
        let (mean, log_std) = self.policy_params(z)?;
        let mut out = Matrix::zeros(mean.rows(), mean.cols());
        for i in 0..mean.rows() {
            for j in 0..mean.cols() {
                let u = if stochastic {
                    let eps: f64 = rng.sample(StandardNormal);
                    mean.get(i, j) + log_std.get(i, j).exp() * r(eps)
                } else {
                    mean.get(i, j)
                };
                out.set(i, j, u.tanh());
            }
        }
        Ok(out)
    }

    /// Single-state policy sample with squash-corrected log-probability.
    pub fn policy_sample(
        &self,
        z: &[R],
        stochastic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<PolicyOutput<R>> {
        let zm = Matrix::from_row(z);
        let (mean, log_std) = self.policy_params(&zm)?;
        let n = self.cfg.action;
        let mut action = Vec::with_capacity(n);
        let mut log_prob = R::zero();
        let half_ln_2pi = r::<R>(0.5 * (2.0 * std::f64::consts::PI).ln());
        for j in 0..n {
            let mu = mean.get(0, j);
            let ls = log_std.get(0, j);
            let sigma = ls.exp();
            let eps: R = if stochastic {
                r(rng.sample::<f64, _>(StandardNormal))
            } else {
                R::zero()
            };
            let u = mu + sigma * eps;
            let a = u.tanh();
            action.push(a);
            log_prob += -ls - half_ln_2pi - r::<R>(0.5) * eps * eps
                - (R::one() - a * a + r(TANH_EPS)).ln();
        }
        Ok(PolicyOutput {
            mean: mean.row(0).to_vec(),
            log_std: log_std.row(0).to_vec(),
            action,
            log_prob,
        })
    }

    /// Bootstrap target `r + γ·(1−terminal)·Q⁻(z', π(z'))` with the
    /// pessimistic head reduction and a fresh policy sample.
    pub fn td_target(
        &self,
        reward: R,
        z_next: &[R],
        gamma: f64,
        terminal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<R> {
        if terminal {
            return Ok(reward);
        }
        let zm = Matrix::from_row(z_next);
        let a = self.policy_actions_batch(&zm, true, rng)?;
        let q = self.q_scalar_batch(&zm, &a, HeadSet::Target, QReduce::MinPair)?;
        Ok(reward + r::<R>(gamma) * q[0])
    }

    pub fn cast<T: Real>(&self) -> WorldModel<T> {
        WorldModel {
            enc: self.enc.cast(),
            dynamics: self.dynamics.cast(),
            qs: self.qs.iter().map(|q| q.cast()).collect(),
            q_targets: self.q_targets.iter().map(|q| q.cast()).collect(),
            policy: self.policy.cast(),
            cfg: self.cfg.clone(),
        }
    }
}

fn reduce_heads<R: Real>(vals: &mut [R], reduce: QReduce) -> R {
    match reduce {
        QReduce::Mean => vals.iter().copied().sum::<R>() / r(vals.len() as f64),
        QReduce::MinPair => {
            if vals.len() < 2 {
                return vals[0];
            }
            let mut lo0 = R::infinity();
            let mut lo1 = R::infinity();
            for &v in vals.iter() {
                if v < lo0 {
                    lo1 = lo0;
                    lo0 = v;
                } else if v < lo1 {
                    lo1 = v;
                }
            }
            (lo0 + lo1) / r(2.0)
        }
    }
}

/// One training batch as dense per-step tensors (`t = 0..=H`).
pub struct SegmentTensors<R> {
    pub obs0: Matrix<R>,
    pub actions: Vec<Matrix<R>>,
    pub next_obs: Vec<Matrix<R>>,
    pub terminals: Vec<Vec<bool>>,
    pub expert_rows: Vec<usize>,
    pub behavioral_rows: Vec<usize>,
}

impl<R: Real> SegmentTensors<R> {
    pub fn horizon(&self) -> usize {
        self.actions.len() - 1
    }

    pub fn batch(&self) -> usize {
        self.obs0.rows()
    }
}

/// Stop-gradient context: everything the losses treat as constant.
pub struct LossContext<R> {
    /// `sg(h(s'_t))` per step: consistency targets.
    pub enc_next: Vec<Matrix<R>>,
    /// Unrolled latents per step, detached; Q/policy/reward inputs.
    pub latents: Vec<Matrix<R>>,
    /// Two-hot encoded TD targets per step.
    pub td_probs: Vec<Matrix<R>>,
    /// Distillation inputs per step, split by source.
    pub expert_za: Vec<Matrix<R>>,
    pub behavioral_za: Vec<Matrix<R>>,
    /// Sampled ensemble index shared by the whole update.
    pub target_k: usize,
    /// Reparameterization noise for the policy loss per step.
    pub policy_noise: Vec<Matrix<R>>,
    /// Mean model reward over expert / behavioral rows (diagnostics).
    pub reward_expert_mean: f64,
    pub reward_behavioral_mean: f64,
}

/// Per-term loss values.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub consistency: f64,
    pub td: f64,
    pub cdred: f64,
}

/// Builds the stop-gradient context for one batch: encodes ground-truth next
/// states, unrolls the dynamics, evaluates rewards and bootstrap values, and
/// draws the stochastic samples the losses will reuse.
pub fn build_loss_context<R: Real>(
    model: &WorldModel<R>,
    reward: &CdredModel<R>,
    batch: &SegmentTensors<R>,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossContext<R>> {
    let horizon = batch.horizon();
    let b = batch.batch();
    let bins = model.cfg.bins();
    let mut enc_next = Vec::with_capacity(horizon + 1);
    let mut latents = Vec::with_capacity(horizon + 1);
    let mut td_probs = Vec::with_capacity(horizon + 1);
    let mut expert_za = Vec::with_capacity(horizon + 1);
    let mut behavioral_za = Vec::with_capacity(horizon + 1);
    let mut policy_noise = Vec::with_capacity(horizon + 1);

    let z0 = model.encode_batch(&batch.obs0)?;
    let mut z_t = z0.clone();
    let mut reward_sum = (0.0f64, 0.0f64);
    for t in 0..=horizon {
        let a_t = &batch.actions[t];
        latents.push(z_t.clone());
        let zn = model.encode_batch(&batch.next_obs[t])?;

        // model reward at the unrolled latent
        let za = Matrix::hcat(&z_t, a_t);
        let r_t = reward.reward_batch(&za)?;
        for &row in &batch.expert_rows {
            reward_sum.0 += r_t[row].f64();
        }
        for &row in &batch.behavioral_rows {
            reward_sum.1 += r_t[row].f64();
        }

        // bootstrap: fresh stochastic policy sample at the encoded next state
        let a_next = model.policy_actions_batch(&zn, true, rng)?;
        let q_boot = model.q_scalar_batch(&zn, &a_next, HeadSet::Target, QReduce::MinPair)?;
        let mut probs = Matrix::zeros(b, model.cfg.bins);
        for i in 0..b {
            let boot = if batch.terminals[t][i] {
                R::zero()
            } else {
                q_boot[i]
            };
            let target = r_t[i] + r::<R>(gamma) * boot;
            let enc = bins.two_hot_encode(target);
            probs.row_mut(i).copy_from_slice(&enc);
        }
        td_probs.push(probs);

        // distillation inputs: encoder latents of the ground-truth states
        let z_enc_t = if t == 0 { &z0 } else { &enc_next[t - 1] };
        let za_enc = Matrix::hcat(z_enc_t, a_t);
        let pick = |rows: &[usize]| -> Matrix<R> {
            if rows.is_empty() {
                Matrix::zeros(0, za_enc.cols())
            } else {
                let picked: Vec<Vec<R>> =
                    rows.iter().map(|&i| za_enc.row(i).to_vec()).collect();
                Matrix::from_rows(&picked)
            }
        };
        expert_za.push(pick(&batch.expert_rows));
        behavioral_za.push(pick(&batch.behavioral_rows));

        // reparameterization noise for the policy loss
        let mut noise = Matrix::zeros(b, model.cfg.action);
        for v in noise.data_mut() {
            *v = r(rng.sample::<f64, _>(StandardNormal));
        }
        policy_noise.push(noise);

        enc_next.push(zn);
        z_t = model.latent_step_batch(&z_t, a_t)?;
    }

    let k = reward.config().k;
    let target_k = rng.gen_range(0..k);
    let denom_e = (batch.expert_rows.len() * (horizon + 1)).max(1) as f64;
    let denom_b = (batch.behavioral_rows.len() * (horizon + 1)).max(1) as f64;
    Ok(LossContext {
        enc_next,
        latents,
        td_probs,
        expert_za,
        behavioral_za,
        target_k,
        policy_noise,
        reward_expert_mean: reward_sum.0 / denom_e,
        reward_behavioral_mean: reward_sum.1 / denom_b,
    })
}

/// Gradients of the joint model objective.
pub struct ModelGrads<R> {
    pub enc: ParamStore<R>,
    pub dynamics: ParamStore<R>,
    pub qs: Vec<ParamStore<R>>,
    pub expert_predictor: ParamStore<R>,
    pub behavioral_predictor: ParamStore<R>,
}

/// Consistency + TD + distillation loss over one batch, with gradients.
///
/// Gradient routing: the consistency term backpropagates through the dynamics
/// chain into the encoder; the TD cross-entropy reaches only the Q heads
/// (latent inputs are the detached context copies); the distillation term
/// reaches only the predictors. In baseline mode the behavioral side of the
/// distillation loss is skipped.
pub fn model_loss_and_grads<R: Real>(
    model: &WorldModel<R>,
    reward: &CdredModel<R>,
    batch: &SegmentTensors<R>,
    ctx: &LossContext<R>,
    lambda: f64,
    red_baseline: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, ModelGrads<R>)> {
    let horizon = batch.horizon();
    let b = batch.batch();
    let inv_b = r::<R>(1.0 / b as f64);
    let num_q = model.qs.len();

    let mut grads = ModelGrads {
        enc: model.enc.params().zeros_like(),
        dynamics: model.dynamics.params().zeros_like(),
        qs: model.qs.iter().map(|q| q.params().zeros_like()).collect(),
        expert_predictor: reward.expert_predictor().params().zeros_like(),
        behavioral_predictor: reward.behavioral_predictor().params().zeros_like(),
    };

    // live unroll through encoder + dynamics
    let (z0, enc_cache) = model.enc.forward(&batch.obs0, Mode::Train, Some(rng))?;
    let mut dyn_caches = Vec::with_capacity(horizon + 1);
    let mut z_pred = Vec::with_capacity(horizon + 1); // z'_t per step
    let mut z_t = z0;
    let mut consistency = R::zero();
    for t in 0..=horizon {
        let za = Matrix::hcat(&z_t, &batch.actions[t]);
        let (zp, cache) = model.dynamics.forward(&za, Mode::Train, Some(rng))?;
        let w = r::<R>(lambda.powi(t as i32));
        let mut c_t = R::zero();
        for i in 0..b {
            c_t += sq_dist(zp.row(i), ctx.enc_next[t].row(i));
        }
        consistency += w * c_t * inv_b;
        dyn_caches.push(cache);
        z_t = zp.clone();
        z_pred.push(zp);
    }

    // TD cross-entropy on detached latents
    let mut td = R::zero();
    for t in 0..=horizon {
        let w = r::<R>(lambda.powi(t as i32));
        let za = Matrix::hcat(&ctx.latents[t], &batch.actions[t]);
        for (qi, q) in model.qs.iter().enumerate() {
            let (logits, cache) = q.forward(&za, Mode::Train, Some(rng))?;
            let mut upstream = Matrix::zeros(b, model.cfg.bins);
            let scale = w * inv_b / r(num_q as f64);
            for i in 0..b {
                let mut p = logits.row(i).to_vec();
                crate::math::softmax_inplace(&mut p);
                let target = ctx.td_probs[t].row(i);
                // CE = −Σ target·log softmax(logits)
                let mut ce = R::zero();
                for (j, (&pj, &tj)) in p.iter().zip(target).enumerate() {
                    if tj > R::zero() {
                        ce -= tj * pj.max(r(1e-30)).ln();
                    }
                    upstream.set(i, j, scale * (pj - tj));
                }
                td += scale * ce;
            }
            q.backward_into(&cache, &upstream, &mut grads.qs[qi])?;
        }
    }

    // distillation term (gradients only reach the predictors)
    let behavioral = if red_baseline {
        None
    } else {
        Some(ctx.behavioral_za.as_slice())
    };
    let (cdred, ge, gb) =
        reward.distillation_loss_and_grads(&ctx.expert_za, behavioral, lambda, ctx.target_k)?;
    grads.expert_predictor = ge;
    grads.behavioral_predictor = gb;

    // backward through the consistency chain, deepest step first
    let mut dz_next: Option<Matrix<R>> = None;
    for t in (0..=horizon).rev() {
        let w = r::<R>(lambda.powi(t as i32));
        let mut g = Matrix::zeros(b, model.cfg.latent);
        for i in 0..b {
            let zp = z_pred[t].row(i);
            let tgt = ctx.enc_next[t].row(i);
            let dst = g.row_mut(i);
            for j in 0..dst.len() {
                dst[j] = r::<R>(2.0) * w * inv_b * (zp[j] - tgt[j]);
            }
        }
        if let Some(dz) = dz_next.take() {
            g.add_assign(&dz);
        }
        let input_grad = model
            .dynamics
            .backward_into(&dyn_caches[t], &g, &mut grads.dynamics)?;
        let (dz, _da) = input_grad.hsplit(model.cfg.latent);
        dz_next = Some(dz);
    }
    if let Some(dz0) = dz_next {
        model.enc.backward_into(&enc_cache, &dz0, &mut grads.enc)?;
    }

    let breakdown = LossBreakdown {
        total: (consistency + td + cdred).f64(),
        consistency: consistency.f64(),
        td: td.f64(),
        cdred: cdred.f64(),
    };
    Ok((breakdown, grads))
}

/// Loss-only evaluation used by finite-difference verification.
pub fn model_loss<R: Real>(
    model: &WorldModel<R>,
    reward: &CdredModel<R>,
    batch: &SegmentTensors<R>,
    ctx: &LossContext<R>,
    lambda: f64,
    red_baseline: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    // reuse the gradient path; the extra work is irrelevant at test scale
    Ok(model_loss_and_grads(model, reward, batch, ctx, lambda, red_baseline, rng)?.0)
}

/// Maximum-entropy policy objective over the detached unrolled latents:
/// `Σ_t λᵗ · mean[−Q(z_t, π(z_t)) + β·log π]`, with `q_for_policy` treated as
/// constants. Returns the loss and the policy-parameter gradients.
pub fn policy_loss_and_grads<R: Real>(
    model: &WorldModel<R>,
    q_for_policy: &[Mlp<R>],
    ctx: &LossContext<R>,
    lambda: f64,
    beta: f64,
) -> Result<(f64, ParamStore<R>)> {
    let bins = model.cfg.bins();
    let action = model.cfg.action;
    let num_q = q_for_policy.len();
    let mut grads = model.policy.params().zeros_like();
    let mut loss = R::zero();
    let half_ln_2pi = r::<R>(0.5 * (2.0 * std::f64::consts::PI).ln());
    let beta_r = r::<R>(beta);

    for (t, z) in ctx.latents.iter().enumerate() {
        let b = z.rows();
        let inv_b = r::<R>(1.0 / b as f64);
        let w = r::<R>(lambda.powi(t as i32));
        if w == R::zero() && t > 0 {
            continue;
        }
        let (pi_out, pi_cache) = model.policy.forward(z, Mode::Train, None)?;
        let noise = &ctx.policy_noise[t];

        // assemble squashed actions
        let mut actions = Matrix::zeros(b, action);
        let mut us = Matrix::zeros(b, action);
        let mut log_stds = Matrix::zeros(b, action);
        let mut clamped = vec![false; b * action];
        for i in 0..b {
            for j in 0..action {
                let mu = pi_out.get(i, j);
                let raw = pi_out.get(i, action + j);
                let ls = raw.max(r(LOG_STD_MIN)).min(r(LOG_STD_MAX));
                clamped[i * action + j] = raw != ls;
                let u = mu + ls.exp() * noise.get(i, j);
                us.set(i, j, u);
                log_stds.set(i, j, ls);
                actions.set(i, j, u.tanh());
            }
        }

        // Q value of the sampled actions, with dQ/da
        let za = Matrix::hcat(z, &actions);
        let mut q_rows = vec![R::zero(); b];
        let mut dq_da = Matrix::zeros(b, action);
        for q in q_for_policy {
            let (logits, cache) = q.forward(&za, Mode::Eval, None)?;
            let mut upstream = Matrix::zeros(b, model.cfg.bins);
            for i in 0..b {
                let mut p = logits.row(i).to_vec();
                crate::math::softmax_inplace(&mut p);
                let mut m = R::zero();
                for (j, pj) in p.iter().enumerate() {
                    m += *pj * r(bins.center(j));
                }
                q_rows[i] += r::<R>(symexp(m.f64())) / r(num_q as f64);
                // d symexp(m)/dm = e^{|m|}
                let dsym = m.f64().abs().exp();
                for (j, pj) in p.iter().enumerate() {
                    upstream.set(
                        i,
                        j,
                        r::<R>(dsym / num_q as f64) * *pj * (r::<R>(bins.center(j)) - m),
                    );
                }
            }
            let input_grad = q.backward_input(&cache, &upstream)?;
            let (_, da) = input_grad.hsplit(model.cfg.latent);
            dq_da.add_assign(&da);
        }

        // loss value + upstream for the policy net
        let mut upstream = Matrix::zeros(b, 2 * action);
        for i in 0..b {
            let mut log_prob = R::zero();
            for j in 0..action {
                let ls = log_stds.get(i, j);
                let eps = noise.get(i, j);
                let a = actions.get(i, j);
                let corr = R::one() - a * a;
                let denom = corr + r(TANH_EPS);
                log_prob +=
                    -ls - half_ln_2pi - r::<R>(0.5) * eps * eps - denom.ln();

                // dL/da from the −Q term
                let dl_da = -w * inv_b * dq_da.get(i, j);
                // ∂logπ/∂u = −ε/σ + 2a·corr/denom ; da/du = corr
                let sigma = ls.exp();
                let dlogpi_du = -eps / sigma + r::<R>(2.0) * a * corr / denom;
                let du_common = beta_r * w * inv_b * dlogpi_du + dl_da * corr;
                // μ path: direct ∂logπ/∂μ = ε/σ, plus u path
                let dmu = beta_r * w * inv_b * (eps / sigma) + du_common;
                // logσ path: direct ∂logπ/∂logσ = −1+ε², u path scaled by σε
                let mut dls = beta_r * w * inv_b * (eps * eps - R::one())
                    + du_common * sigma * eps;
                if clamped[i * action + j] {
                    dls = R::zero();
                }
                upstream.set(i, j, dmu);
                upstream.set(i, action + j, dls);
            }
            loss += w * inv_b * (-q_rows[i] + beta_r * log_prob);
        }
        model
            .policy
            .backward_into(&pi_cache, &upstream, &mut grads)?;
    }
    Ok((loss.f64(), grads))
}

/// Loss-only variant for finite-difference verification.
pub fn policy_loss<R: Real>(
    model: &WorldModel<R>,
    q_for_policy: &[Mlp<R>],
    ctx: &LossContext<R>,
    lambda: f64,
    beta: f64,
) -> Result<f64> {
    Ok(policy_loss_and_grads(model, q_for_policy, ctx, lambda, beta)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::{GFn, RewardConfig};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            latent: 16,
            enc_hidden: 12,
            hidden: 12,
            num_q: 3,
            bins: 11,
            simnorm_group: 8,
            q_dropout: 0.0,
            ..ModelConfig::new(4, 2)
        }
    }

    fn small_reward(latent: usize, action: usize) -> CdredModel<f64> {
        let cfg = RewardConfig {
            k: 2,
            p: 4,
            hidden: 8,
            g: GFn::Linear,
            ..RewardConfig::default()
        };
        CdredModel::init(latent, action, cfg, 17).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn synthetic_batch(
        model: &WorldModel<f64>,
        horizon: usize,
        b: usize,
        seed: u64,
    ) -> SegmentTensors<f64> {
        let mut rg = rng(seed);
        let mut rand_mat = |rows: usize, cols: usize| {
            let mut m = Matrix::zeros(rows, cols);
            for v in m.data_mut() {
                *v = rg.gen::<f64>() * 2.0 - 1.0;
            }
            m
        };
        let obs0 = rand_mat(b, model.cfg.obs);
        let actions = (0..=horizon).map(|_| rand_mat(b, model.cfg.action)).collect();
        let next_obs = (0..=horizon).map(|_| rand_mat(b, model.cfg.obs)).collect();
        SegmentTensors {
            obs0,
            actions,
            next_obs,
            terminals: vec![vec![false; b]; horizon + 1],
            expert_rows: (0..b / 2).collect(),
            behavioral_rows: (b / 2..b).collect(),
        }
    }

    #[test]
    fn encode_produces_simplex_groups_and_is_deterministic() {
        let model: WorldModel<f64> = WorldModel::init(small_cfg(), 3).unwrap();
        let obs = [0.4, -0.2, 1.1, 0.0];
        let z = model.encode(&obs).unwrap();
        for group in z.0.chunks(8) {
            let s: f64 = group.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(group.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let z2 = model.encode(&obs).unwrap();
        assert_eq!(z.0, z2.0);
        let z3 = model.encode(&[0.5, -0.2, 1.1, 0.0]).unwrap();
        assert!(z.0.iter().zip(&z3.0).any(|(a, b)| a != b));
    }

    #[test]
    fn latent_step_keeps_invariants_and_unroll_moves() {
        let model: WorldModel<f64> = WorldModel::init(small_cfg(), 4).unwrap();
        let mut z = model.encode(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = [0.5, -0.5];
        let mut seen: Vec<Vec<f64>> = vec![z.0.clone()];
        for _ in 0..3 {
            z = model.latent_step(&z, &a).unwrap();
            for group in z.0.chunks(8) {
                let s: f64 = group.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            assert!(
                seen.iter().all(|prev| prev.iter().zip(&z.0).any(|(x, y)| x != y)),
                "unrolled latents should be distinct"
            );
            seen.push(z.0.clone());
        }
        let z_again = model
            .latent_step(&LatentState(seen[0].clone()), &a)
            .unwrap();
        assert_eq!(z_again.0, seen[1]);
    }

    #[test]
    fn two_hot_anchor_cases_and_roundtrip() {
        let bins = ValueBins {
            bins: 11,
            vmin: -10.0,
            vmax: 10.0,
        };
        // exactly at a bin center → one-hot
        let v_at = symexp(bins.center(7));
        let enc = bins.two_hot_encode::<f64>(v_at);
        assert!((enc[7] - 1.0).abs() < 1e-9);
        assert!(enc.iter().enumerate().all(|(i, &p)| i == 7 || p.abs() < 1e-9));

        // midway between adjacent centers → (0.5, 0.5)
        let mid = symexp(0.5 * (bins.center(3) + bins.center(4)));
        let enc = bins.two_hot_encode::<f64>(mid);
        assert!((enc[3] - 0.5).abs() < 1e-9);
        assert!((enc[4] - 0.5).abs() < 1e-9);

        // decode(encode(v)) = v for 1000 random draws in range
        let big = ValueBins {
            bins: 101,
            vmin: -10.0,
            vmax: 10.0,
        };
        let mut rg = rng(5);
        for _ in 0..1000 {
            let y = rg.gen::<f64>() * 19.8 - 9.9;
            let v = symexp(y);
            let dec: f64 = big.two_hot_decode(&big.two_hot_encode::<f64>(v));
            assert!(
                (dec - v).abs() < 1e-6 * v.abs().max(1.0),
                "roundtrip {v} -> {dec}"
            );
        }
    }

    #[test]
    fn q_value_bin_anchors() {
        let cfg = small_cfg();
        let mut model: WorldModel<f64> = WorldModel::init(cfg.clone(), 5).unwrap();
        // zero out the final Q layers → uniform logits → decoded scalar 0
        for q in model.qs.iter_mut() {
            let n = q.params().len();
            q.params_mut().group_mut(n - 2).value.fill(0.0);
            q.params_mut().group_mut(n - 1).value.fill(0.0);
        }
        let z = model.encode(&[0.0, 0.1, 0.2, 0.3]).unwrap();
        let (v, probs) = model.q_value(&z.0, &[0.0, 0.0], HeadSet::Online).unwrap();
        assert!(v.abs() < 1e-12);
        for p in &probs {
            assert!((p - 1.0 / cfg.bins as f64).abs() < 1e-12);
        }

        // one-hot logits at bin c → decoded scalar = center(c) in transformed space
        let bins = cfg.bins();
        let mut one_hot = vec![0.0f64; cfg.bins];
        one_hot[2] = 1.0;
        let dec: f64 = bins.two_hot_decode(&one_hot);
        assert!((dec - symexp(bins.center(2))).abs() < 1e-12);

        // identical heads → ensemble scalar equals any single head's value
        let first = model.qs[0].clone();
        for q in model.qs.iter_mut() {
            *q = first.clone();
        }
        let (v_ens, _) = model.q_value(&z.0, &[0.3, -0.3], HeadSet::Online).unwrap();
        let single = {
            let za = Matrix::hcat(&Matrix::from_row(&z.0), &Matrix::from_row(&[0.3, -0.3]));
            let logits = model.qs[0].eval(&za).unwrap();
            bins.decode_logits(logits.row(0))
        };
        assert!((v_ens - single).abs() < 1e-12);
    }

    #[test]
    fn policy_sampling_bounds_and_low_variance_limit() {
        let model: WorldModel<f64> = WorldModel::init(small_cfg(), 6).unwrap();
        let z = model.encode(&[0.3, -0.6, 0.9, 0.2]).unwrap();
        let mut rg = rng(9);
        for _ in 0..50 {
            let out = model.policy_sample(&z.0, true, &mut rg).unwrap();
            assert!(out.action.iter().all(|&a| a > -1.0 && a < 1.0));
        }

        // drive log-std to the floor: bias the second half of the output
        let mut pinned = model;
        {
            let np = pinned.policy.params().len();
            let bias = &mut pinned.policy.params_mut().group_mut(np - 1).value;
            for j in 0..2 {
                bias.set(0, 2 + j, -50.0); // clamps to LOG_STD_MIN
            }
        }
        let det = pinned.policy_sample(&z.0, false, &mut rg).unwrap();
        let sto = pinned.policy_sample(&z.0, true, &mut rg).unwrap();
        for (d, s) in det.action.iter().zip(&sto.action) {
            assert!((d - s).abs() < 1e-3);
        }
        assert!(pinned
            .policy_sample(&z.0, true, &mut rg)
            .unwrap()
            .log_std
            .iter()
            .all(|&ls| (ls - LOG_STD_MIN).abs() < 1e-12));
    }

    /// Histogram oracle: the reported density at a reference point matches the
    /// empirical frequency of samples landing near it.
    #[test]
    fn policy_log_prob_matches_empirical_density() {
        let cfg = ModelConfig {
            action: 1,
            ..small_cfg()
        };
        let model: WorldModel<f64> = WorldModel::init(cfg, 11).unwrap();
        let z = model.encode(&[0.2, 0.4, -0.1, 0.6]).unwrap();
        let mut rg = rng(13);
        let n = 200_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| model.policy_sample(&z.0, true, &mut rg).unwrap().action[0])
            .collect();
        // reference point: the median region of the squashed distribution
        let det = model.policy_sample(&z.0, false, &mut rg).unwrap();
        let a0 = det.action[0];
        let delta = 0.01;
        let count = samples
            .iter()
            .filter(|&&a| (a - a0).abs() < delta)
            .count();
        let empirical = count as f64 / (n as f64 * 2.0 * delta);

        // reported density at a0: log_prob of the deterministic sample (ε=0
        // gives u=μ, a=tanh(μ)=a0)
        let reported = det.log_prob.exp();
        let rel = (empirical - reported).abs() / reported;
        assert!(
            rel < 0.05,
            "empirical {empirical} vs reported {reported} (rel {rel})"
        );
    }

    #[test]
    fn td_target_anchor_values() {
        let cfg = small_cfg();
        let mut model: WorldModel<f64> = WorldModel::init(cfg.clone(), 21).unwrap();
        // pin every target head to decode exactly 10
        let bins = cfg.bins();
        let target_probs = bins.two_hot_encode::<f64>(10.0);
        for q in model.q_targets.iter_mut() {
            let n = q.params().len();
            q.params_mut().group_mut(n - 2).value.fill(0.0);
            let bias = &mut q.params_mut().group_mut(n - 1).value;
            for (j, &p) in target_probs.iter().enumerate() {
                bias.set(0, j, if p > 0.0 { p.ln() } else { -100.0 });
            }
        }
        let z = model.encode(&[0.1, 0.1, 0.1, 0.1]).unwrap();
        let mut rg = rng(2);
        let t = model.td_target(1.0, &z.0, 0.99, false, &mut rg).unwrap();
        assert!((t - 10.9).abs() < 1e-6, "got {t}");
        let t0 = model.td_target(1.0, &z.0, 0.0, false, &mut rg).unwrap();
        assert!((t0 - 1.0).abs() < 1e-12);
        let tt = model.td_target(1.0, &z.0, 0.99, true, &mut rg).unwrap();
        assert_eq!(tt, 1.0);
    }

    #[test]
    fn model_loss_with_zero_lambda_matches_single_step() {
        let model: WorldModel<f64> = WorldModel::init(small_cfg(), 31).unwrap();
        let reward = small_reward(16, 2);
        let long = synthetic_batch(&model, 2, 4, 77);
        let short = SegmentTensors {
            obs0: long.obs0.clone(),
            actions: vec![long.actions[0].clone()],
            next_obs: vec![long.next_obs[0].clone()],
            terminals: vec![long.terminals[0].clone()],
            expert_rows: long.expert_rows.clone(),
            behavioral_rows: long.behavioral_rows.clone(),
        };
        let mut ctx_long = build_loss_context(&model, &reward, &long, 0.99, &mut rng(1)).unwrap();
        let mut ctx_short = build_loss_context(&model, &reward, &short, 0.99, &mut rng(1)).unwrap();
        ctx_long.target_k = 0;
        ctx_short.target_k = 0;
        let (l_long, _) =
            model_loss_and_grads(&model, &reward, &long, &ctx_long, 0.0, false, &mut rng(3)).unwrap();
        let (l_short, _) =
            model_loss_and_grads(&model, &reward, &short, &ctx_short, 0.0, false, &mut rng(3)).unwrap();
        assert!((l_long.total - l_short.total).abs() < 1e-9);
    }

    /// Scalar recomputation of the full objective on an H=1 batch using only
    /// the public single-input evaluation paths.
    #[test]
    fn model_loss_matches_independent_recomputation() {
        let model: WorldModel<f64> = WorldModel::init(small_cfg(), 41).unwrap();
        let reward = small_reward(16, 2);
        let batch = synthetic_batch(&model, 1, 2, 5);
        let lambda = 0.5;
        let ctx = build_loss_context(&model, &reward, &batch, 0.9, &mut rng(7)).unwrap();
        let (got, _) =
            model_loss_and_grads(&model, &reward, &batch, &ctx, lambda, false, &mut rng(9)).unwrap();

        // consistency: unroll by hand
        let mut expected_cons = 0.0;
        let mut z = model.encode_batch(&batch.obs0).unwrap();
        for t in 0..=1 {
            let zp = model.latent_step_batch(&z, &batch.actions[t]).unwrap();
            let zn = model.encode_batch(&batch.next_obs[t]).unwrap();
            let mut c = 0.0;
            for i in 0..2 {
                c += sq_dist(zp.row(i), zn.row(i));
            }
            expected_cons += lambda.powi(t as i32) * c / 2.0;
            z = zp;
        }
        assert!((got.consistency - expected_cons).abs() < 1e-9);

        // TD: recompute cross entropy per head from the context targets
        let bins = model.cfg.bins();
        let mut expected_td = 0.0;
        for t in 0..=1 {
            let za = Matrix::hcat(&ctx.latents[t], &batch.actions[t]);
            for q in model.q_heads() {
                let logits = q.eval(&za).unwrap();
                for i in 0..2 {
                    let mut p = logits.row(i).to_vec();
                    crate::math::softmax_inplace(&mut p);
                    let tgt = ctx.td_probs[t].row(i);
                    let mut ce = 0.0;
                    for (pj, tj) in p.iter().zip(tgt) {
                        if *tj > 0.0 {
                            ce -= tj * pj.ln();
                        }
                    }
                    expected_td += lambda.powi(t as i32) * ce / (2.0 * 3.0);
                }
            }
        }
        let _ = bins;
        assert!((got.td - expected_td).abs() < 1e-9);

        // distillation term recomputed through the reward module itself
        let expected_cdred = reward
            .distillation_loss(&ctx.expert_za, Some(&ctx.behavioral_za), lambda, ctx.target_k)
            .unwrap();
        assert!((got.cdred - expected_cdred).abs() < 1e-12);
        assert!((got.total - (got.consistency + got.td + got.cdred)).abs() < 1e-9);
    }

    /// Finite-difference verification of every parameter gradient of the
    /// joint objective (consistency + TD + distillation) and the policy loss.
    #[test]
    fn joint_loss_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            latent: 8,
            enc_hidden: 6,
            hidden: 6,
            num_q: 2,
            bins: 7,
            simnorm_group: 4,
            q_dropout: 0.0,
            ..ModelConfig::new(3, 2)
        };
        let model: WorldModel<f64> = WorldModel::init(cfg, 51).unwrap();
        let rcfg = RewardConfig {
            k: 2,
            p: 3,
            hidden: 5,
            ..RewardConfig::default()
        };
        let reward: CdredModel<f64> = CdredModel::init(8, 2, rcfg, 3).unwrap();
        let batch = synthetic_batch(&model, 1, 2, 15);
        let ctx = build_loss_context(&model, &reward, &batch, 0.9, &mut rng(19)).unwrap();
        let lambda = 0.6;
        let (_, grads) =
            model_loss_and_grads(&model, &reward, &batch, &ctx, lambda, false, &mut rng(23)).unwrap();

        let loss_of = |m: &WorldModel<f64>, rw: &CdredModel<f64>| -> f64 {
            model_loss(m, rw, &batch, &ctx, lambda, false, &mut rng(23))
                .unwrap()
                .total
        };

        let h = 1e-6;
        let check = |name: &str,
                     an: &ParamStore<f64>,
                     perturb: &dyn Fn(usize, usize, usize, f64) -> f64| {
            for gi in 0..an.len() {
                let g = an.group(gi);
                let cols = g.value.cols();
                for k in (0..g.value.len()).step_by(3) {
                    let (i, j) = (k / cols, k % cols);
                    let fp = perturb(gi, i, j, h);
                    let fm = perturb(gi, i, j, -h);
                    let fd = (fp - fm) / (2.0 * h);
                    let a = g.value.get(i, j);
                    let denom = fd.abs().max(a.abs()).max(1e-6);
                    assert!(
                        (fd - a).abs() / denom < 1e-4,
                        "{name} group {gi} [{i},{j}]: fd={fd} an={a}"
                    );
                }
            }
        };

        check("encoder", &grads.enc, &|gi, i, j, d| {
            let mut m = model.cast::<f64>();
            let v = m.enc.params().group(gi).value.get(i, j);
            m.enc.params_mut().group_mut(gi).value.set(i, j, v + d);
            loss_of(&m, &reward)
        });
        check("dynamics", &grads.dynamics, &|gi, i, j, d| {
            let mut m = model.cast::<f64>();
            let v = m.dynamics.params().group(gi).value.get(i, j);
            m.dynamics.params_mut().group_mut(gi).value.set(i, j, v + d);
            loss_of(&m, &reward)
        });
        for (qi, qg) in grads.qs.iter().enumerate() {
            check(&format!("q{qi}"), qg, &|gi, i, j, d| {
                let mut m = model.cast::<f64>();
                let v = m.qs[qi].params().group(gi).value.get(i, j);
                m.qs[qi].params_mut().group_mut(gi).value.set(i, j, v + d);
                loss_of(&m, &reward)
            });
        }
        check("expert predictor", &grads.expert_predictor, &|gi, i, j, d| {
            let mut rw = reward.cast::<f64>();
            let v = rw.expert_predictor().params().group(gi).value.get(i, j);
            rw.expert_predictor_mut()
                .params_mut()
                .group_mut(gi)
                .value
                .set(i, j, v + d);
            loss_of(&model, &rw)
        });

        // policy loss (reparameterized): tolerance 1e-3
        let beta = 0.05;
        let (_, pgrads) =
            policy_loss_and_grads(&model, model.q_heads(), &ctx, lambda, beta).unwrap();
        let q_frozen: Vec<Mlp<f64>> = model.q_heads().to_vec();
        for gi in 0..pgrads.len() {
            let g = pgrads.group(gi);
            let cols = g.value.cols();
            for k in (0..g.value.len()).step_by(3) {
                let (i, j) = (k / cols, k % cols);
                let eval = |d: f64| -> f64 {
                    let mut m = model.cast::<f64>();
                    let v = m.policy.params().group(gi).value.get(i, j);
                    m.policy.params_mut().group_mut(gi).value.set(i, j, v + d);
                    policy_loss(&m, &q_frozen, &ctx, lambda, beta).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = g.value.get(i, j);
                let denom = fd.abs().max(a.abs()).max(1e-6);
                assert!(
                    (fd - a).abs() / denom < 1e-3,
                    "policy group {gi} [{i},{j}]: fd={fd} an={a}"
                );
            }
        }
    }

    #[test]
    fn policy_loss_zero_beta_zero_q_is_zero() {
        let mut model: WorldModel<f64> = WorldModel::init(small_cfg(), 61).unwrap();
        let reward = small_reward(16, 2);
        for q in model.qs.iter_mut() {
            for g in q.params_mut().iter_mut() {
                g.value.fill(0.0);
            }
        }
        let batch = synthetic_batch(&model, 1, 2, 3);
        let ctx = build_loss_context(&model, &reward, &batch, 0.9, &mut rng(4)).unwrap();
        let (loss, _) = policy_loss_and_grads(&model, model.q_heads(), &ctx, 0.5, 0.0).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    /// With a constant Q the objective reduces to β·E[log π], so gradient
    /// steps must raise the policy entropy. For the squashed Gaussian the
    /// entropy peaks at a finite log-std (≈ −0.35 at zero mean), so we start
    /// below it and check the log-std rises while E[log π] falls.
    #[test]
    fn policy_entropy_rises_under_constant_q() {
        let mut model: WorldModel<f64> = WorldModel::init(small_cfg(), 71).unwrap();
        let reward = small_reward(16, 2);
        for q in model.qs.iter_mut() {
            for g in q.params_mut().iter_mut() {
                g.value.fill(0.0);
            }
        }
        // start well below the squashed-entropy optimum
        {
            let np = model.policy.params().len();
            let bias = &mut model.policy.params_mut().group_mut(np - 1).value;
            for j in 0..2 {
                bias.set(0, 2 + j, -3.0);
            }
        }
        let batch = synthetic_batch(&model, 0, 4, 8);
        let mean_log_std = |m: &WorldModel<f64>| -> f64 {
            let z = m.encode_batch(&batch.obs0).unwrap();
            let (_, ls) = m.policy_params(&z).unwrap();
            ls.data().iter().sum::<f64>() / ls.len() as f64
        };
        let mean_log_pi = |m: &WorldModel<f64>| -> f64 {
            let z = m.encode_batch(&batch.obs0).unwrap();
            let mut rg = rng(77);
            let mut acc = 0.0;
            for i in 0..z.rows() {
                for _ in 0..256 {
                    acc += m.policy_sample(z.row(i), true, &mut rg).unwrap().log_prob;
                }
            }
            acc / (z.rows() * 256) as f64
        };
        let before = mean_log_std(&model);
        let before_lp = mean_log_pi(&model);
        let mut opt = crate::nn::Adam::new(model.policy.params());
        let q_frozen: Vec<Mlp<f64>> = model.q_heads().to_vec();
        for step in 0..200 {
            let ctx =
                build_loss_context(&model, &reward, &batch, 0.9, &mut rng(100 + step)).unwrap();
            let (_, g) = policy_loss_and_grads(&model, &q_frozen, &ctx, 0.5, 1.0).unwrap();
            let mut p = std::mem::take(model.policy.params_mut());
            opt.step(&mut p, &g, 3e-3).unwrap();
            *model.policy.params_mut() = p;
        }
        let after = mean_log_std(&model);
        let after_lp = mean_log_pi(&model);
        assert!(
            after > before + 0.5,
            "log-std should rise from below the optimum: {before} -> {after}"
        );
        assert!(
            after_lp < before_lp,
            "mean log π should fall as entropy rises: {before_lp} -> {after_lp}"
        );
    }

    /// Train a Q head toward −‖a‖², then check policy updates drive the mean
    /// action toward the analytic optimum at zero.
    #[test]
    fn policy_seeks_quadratic_q_optimum() {
        let cfg = ModelConfig {
            latent: 8,
            enc_hidden: 8,
            hidden: 16,
            num_q: 1,
            bins: 21,
            simnorm_group: 4,
            q_dropout: 0.0,
            ..ModelConfig::new(3, 1)
        };
        let mut model: WorldModel<f64> = WorldModel::init(cfg.clone(), 81).unwrap();
        let reward: CdredModel<f64> = {
            let rcfg = RewardConfig {
                k: 1,
                p: 2,
                hidden: 4,
                ..RewardConfig::default()
            };
            CdredModel::init(8, 1, rcfg, 1).unwrap()
        };
        let bins = cfg.bins();
        let mut rg = rng(91);

        // supervise the Q head on q(z, a) = −a² over random pairs
        let mut opt_q = crate::nn::Adam::new(model.qs[0].params());
        for _ in 0..800 {
            let mut z = Matrix::zeros(16, 8);
            for v in z.data_mut() {
                *v = rg.gen::<f64>() * 0.25;
            }
            // normalize groups so inputs look like latents
            for i in 0..16 {
                for chunk in z.row_mut(i).chunks_mut(4) {
                    let s: f64 = chunk.iter().sum();
                    for v in chunk.iter_mut() {
                        *v /= s;
                    }
                }
            }
            let mut a = Matrix::zeros(16, 1);
            for v in a.data_mut() {
                *v = rg.gen::<f64>() * 2.0 - 1.0;
            }
            let za = Matrix::hcat(&z, &a);
            let (logits, cache) = model.qs[0].forward(&za, Mode::Train, None).unwrap();
            let mut upstream = Matrix::zeros(16, cfg.bins);
            for i in 0..16 {
                let target = bins.two_hot_encode::<f64>(-a.get(i, 0) * a.get(i, 0));
                let mut p = logits.row(i).to_vec();
                crate::math::softmax_inplace(&mut p);
                for j in 0..cfg.bins {
                    upstream.set(i, j, (p[j] - target[j]) / 16.0);
                }
            }
            let (g, _) = model.qs[0].backward(&cache, &upstream).unwrap();
            let mut p = std::mem::take(model.qs[0].params_mut());
            opt_q.step(&mut p, &g, 3e-3).unwrap();
            *model.qs[0].params_mut() = p;
        }

        let batch = synthetic_batch(&model, 0, 8, 13);
        let mean_abs_action = |m: &WorldModel<f64>| -> f64 {
            let z = m.encode_batch(&batch.obs0).unwrap();
            let mut rg = rng(0);
            let a = m.policy_actions_batch(&z, false, &mut rg).unwrap();
            a.data().iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64
        };
        // bias the policy away from zero first
        {
            let np = model.policy.params().len();
            model.policy.params_mut().group_mut(np - 1).value.set(0, 0, 1.0);
        }
        let before = mean_abs_action(&model);
        let q_frozen: Vec<Mlp<f64>> = model.q_heads().to_vec();
        let mut opt_pi = crate::nn::Adam::new(model.policy.params());
        for step in 0..400 {
            let ctx =
                build_loss_context(&model, &reward, &batch, 0.9, &mut rng(500 + step)).unwrap();
            let (_, g) = policy_loss_and_grads(&model, &q_frozen, &ctx, 0.5, 0.0).unwrap();
            let mut p = std::mem::take(model.policy.params_mut());
            opt_pi.step(&mut p, &g, 3e-3).unwrap();
            *model.policy.params_mut() = p;
        }
        let after = mean_abs_action(&model);
        assert!(
            after < before * 0.5 && after < 0.15,
            "policy mean should approach 0: {before} -> {after}"
        );
    }

    #[test]
    fn q_targets_only_move_via_soft_update() {
        let model: WorldModel<f64> = WorldModel::init(small_cfg(), 99).unwrap();
        let reward = small_reward(16, 2);
        let batch = synthetic_batch(&model, 1, 4, 3);
        let snapshot: Vec<Vec<f64>> = model
            .q_targets
            .iter()
            .map(|q| q.params().iter().flat_map(|g| g.value.data().to_vec()).collect())
            .collect();
        let mut model = model;
        let mut opts: Vec<_> = model.qs.iter().map(|q| crate::nn::Adam::new(q.params())).collect();
        for step in 0..5 {
            let ctx =
                build_loss_context(&model, &reward, &batch, 0.9, &mut rng(step)).unwrap();
            let (_, grads) =
                model_loss_and_grads(&model, &reward, &batch, &ctx, 0.5, false, &mut rng(step + 1))
                    .unwrap();
            for (qi, q) in model.qs.iter_mut().enumerate() {
                let mut p = std::mem::take(q.params_mut());
                opts[qi].step(&mut p, &grads.qs[qi], 1e-3).unwrap();
                *q.params_mut() = p;
            }
        }
        let after: Vec<Vec<f64>> = model
            .q_targets
            .iter()
            .map(|q| q.params().iter().flat_map(|g| g.value.data().to_vec()).collect())
            .collect();
        assert_eq!(snapshot, after, "targets moved without soft update");
        model.soft_update_targets(0.5).unwrap();
        let moved: Vec<Vec<f64>> = model
            .q_targets
            .iter()
            .map(|q| q.params().iter().flat_map(|g| g.value.data().to_vec()).collect())
            .collect();
        assert_ne!(snapshot, moved);
    }

    /// Fifty optimizer steps on a fixed synthetic batch must drive the joint
    /// loss down, allowing 1e-3 of noise over any 10-step window.
    #[test]
    fn model_loss_decreases_over_training() {
        let model: WorldModel<f64> = WorldModel::init(small_cfg(), 111).unwrap();
        let mut model = model;
        let mut reward = small_reward(16, 2);
        let batch = synthetic_batch(&model, 2, 6, 21);
        let mut opt_enc = crate::nn::Adam::new(model.enc.params());
        let mut opt_dyn = crate::nn::Adam::new(model.dynamics.params());
        let mut opt_qs: Vec<_> = model.qs.iter().map(|q| crate::nn::Adam::new(q.params())).collect();
        let mut opt_e = crate::nn::Adam::new(reward.expert_predictor().params());
        let mut opt_b = crate::nn::Adam::new(reward.behavioral_predictor().params());
        let mut losses = Vec::new();
        for step in 0..50u64 {
            let ctx =
                build_loss_context(&model, &reward, &batch, 0.9, &mut rng(1000 + step)).unwrap();
            let (loss, grads) = model_loss_and_grads(
                &model,
                &reward,
                &batch,
                &ctx,
                0.5,
                false,
                &mut rng(2000 + step),
            )
            .unwrap();
            losses.push(loss.total);
            let lr = 3e-3;
            let mut p = std::mem::take(model.enc.params_mut());
            opt_enc.step(&mut p, &grads.enc, lr).unwrap();
            *model.enc.params_mut() = p;
            let mut p = std::mem::take(model.dynamics.params_mut());
            opt_dyn.step(&mut p, &grads.dynamics, lr).unwrap();
            *model.dynamics.params_mut() = p;
            for (qi, q) in model.qs.iter_mut().enumerate() {
                let mut p = std::mem::take(q.params_mut());
                opt_qs[qi].step(&mut p, &grads.qs[qi], lr).unwrap();
                *q.params_mut() = p;
            }
            let mut p = std::mem::take(reward.expert_predictor_mut().params_mut());
            opt_e.step(&mut p, &grads.expert_predictor, lr).unwrap();
            *reward.expert_predictor_mut().params_mut() = p;
            let mut p = std::mem::take(reward.behavioral_predictor_mut().params_mut());
            opt_b.step(&mut p, &grads.behavioral_predictor, lr).unwrap();
            *reward.behavioral_predictor_mut().params_mut() = p;
            model.soft_update_targets(0.02).unwrap();
        }
        for i in 0..losses.len() - 10 {
            assert!(
                losses[i + 10] < losses[i] + 1e-3,
                "loss failed to decrease: step {i} {} -> step {} {}",
                losses[i],
                i + 10,
                losses[i + 10]
            );
        }
    }
}
