//! Multilayer perceptrons with exact reverse-mode gradients.
//!
//! The layer stack is fixed by construction: every layer is a linear map
//! optionally followed by dropout, layer normalization, and one of the two
//! activations used throughout the crate (`Mish` on hidden layers, `SimNorm`
//! on latent-producing outputs). Gradients are propagated by hand per layer;
//! correctness is pinned by central finite-difference tests.

use crate::math::{matmul, matmul_nt, matmul_tn, r, Matrix, Real};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    None,
    Mish,
    SimNorm { group: usize },
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub out: usize,
    pub act: Activation,
    pub layer_norm: bool,
    pub dropout: f64,
}

/// Widths, activations, and normalization flags for one MLP.
#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    pub fn new(input: usize) -> Self {
        MlpSpec {
            input,
            layers: Vec::new(),
        }
    }

    /// Linear + LayerNorm + activation (the `NormedLinear` block).
    pub fn normed(self, out: usize, act: Activation) -> Self {
        self.layer(LayerSpec {
            out,
            act,
            layer_norm: true,
            dropout: 0.0,
        })
    }

    /// `NormedLinear` with dropout applied between the linear map and the norm.
    pub fn normed_dropout(self, out: usize, act: Activation, dropout: f64) -> Self {
        self.layer(LayerSpec {
            out,
            act,
            layer_norm: true,
            dropout,
        })
    }

    /// Plain linear output head.
    pub fn linear(self, out: usize) -> Self {
        self.layer(LayerSpec {
            out,
            act: Activation::None,
            layer_norm: false,
            dropout: 0.0,
        })
    }

    pub fn layer(mut self, layer: LayerSpec) -> Self {
        self.layers.push(layer);
        self
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.out).unwrap_or(self.input)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.layers.is_empty() {
            return Err(Error::Config("MlpSpec needs input width and layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.out == 0 {
                return Err(Error::Config(format!("layer {i} has zero width")));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::Config(format!(
                    "layer {i} dropout {} outside [0,1)",
                    l.dropout
                )));
            }
            if let Activation::SimNorm { group } = l.act {
                if group == 0 || l.out % group != 0 {
                    return Err(Error::shape(
                        format!("layer {i} simnorm group"),
                        format!("width divisible by {group}"),
                        l.out,
                    ));
                }
            }
        }
        Ok(())
    }

    /// FNV-1a over a canonical rendering; recorded in checkpoints so loads can
    /// be validated against the spec they were saved from.
    pub fn hash64(&self) -> u64 {
        let mut s = format!("in:{}", self.input);
        for l in &self.layers {
            let act = match l.act {
                Activation::None => "none".to_string(),
                Activation::Mish => "mish".to_string(),
                Activation::SimNorm { group } => format!("simnorm{group}"),
            };
            s.push_str(&format!(
                "|{}:{}:{}:{}",
                l.out, act, l.layer_norm as u8, l.dropout
            ));
        }
        fnv1a(s.as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One named parameter array with a trainable flag.
#[derive(Clone)]
pub struct ParamGroup<R> {
    pub name: String,
    pub value: Matrix<R>,
    pub trainable: bool,
}

/// Ordered collection of named parameter groups. Iteration order is insertion
/// order, which keeps every reduction over parameters deterministic.
#[derive(Clone)]
pub struct ParamStore<R> {
    groups: Vec<ParamGroup<R>>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore { groups: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix<R>, trainable: bool) {
        self.groups.push(ParamGroup {
            name: name.into(),
            value,
            trainable,
        });
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamGroup<R>> {
        self.groups.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamGroup<R>> {
        self.groups.iter_mut()
    }

    pub fn group(&self, i: usize) -> &ParamGroup<R> {
        &self.groups[i]
    }

    pub fn group_mut(&mut self, i: usize) -> &mut ParamGroup<R> {
        &mut self.groups[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamGroup<R>> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Mirror with identical names/shapes/flags and zeroed values (gradient
    /// accumulator).
    pub fn zeros_like(&self) -> ParamStore<R> {
        ParamStore {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup {
                    name: g.name.clone(),
                    value: Matrix::zeros(g.value.rows(), g.value.cols()),
                    trainable: g.trainable,
                })
                .collect(),
        }
    }

    pub fn compatible_with(&self, other: &ParamStore<R>) -> Result<()> {
        if self.groups.len() != other.groups.len() {
            return Err(Error::shape(
                "param store",
                self.groups.len(),
                other.groups.len(),
            ));
        }
        for (a, b) in self.groups.iter().zip(&other.groups) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::shape(
                    format!("param group `{}`", a.name),
                    format!("{:?}", a.value.shape()),
                    format!("`{}` {:?}", b.name, b.value.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: R) {
        for g in &mut self.groups {
            g.value.scale(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.groups.iter().all(|g| g.value.all_finite())
    }

    /// First group containing a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.groups
            .iter()
            .find(|g| !g.value.all_finite())
            .map(|g| g.name.as_str())
    }

    /// L2 norm over every entry (used for gradient-norm diagnostics).
    pub fn global_l2_norm(&self) -> f64 {
        self.groups
            .iter()
            .flat_map(|g| g.value.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup {
                    name: g.name.clone(),
                    value: g.value.cast(),
                    trainable: g.trainable,
                })
                .collect(),
        }
    }
}

/// `x · tanh(softplus(x))`, evaluated through `s = eˣ` so one exponential
/// serves both the forward value and the derivative.
#[inline(always)]
pub fn mish<R: Real>(x: R) -> R {
    mish_parts(x).0
}

/// Returns `(mish(x), tanh(softplus(x)), sigmoid(x))`.
#[inline(always)]
fn mish_parts<R: Real>(x: R) -> (R, R, R) {
    if x >= r(15.0) {
        // asymptote: error below 1e-12 here
        (x, R::one(), R::one())
    } else {
        let s = x.exp();
        let d = s * s + r::<R>(2.0) * s;
        let t = d / (d + r(2.0));
        let sig = s / (R::one() + s);
        (x * t, t, sig)
    }
}

/// Group-wise softmax: each contiguous `group`-sized block is normalized onto
/// the simplex.
pub fn simnorm<R: Real>(v: &[R], group: usize) -> Result<Vec<R>> {
    if group == 0 || v.len() % group != 0 {
        return Err(Error::shape(
            "simnorm",
            format!("length divisible by {group}"),
            v.len(),
        ));
    }
    let mut out = v.to_vec();
    for chunk in out.chunks_mut(group) {
        crate::math::softmax_inplace(chunk);
    }
    Ok(out)
}

struct LnCache<R> {
    xhat: Matrix<R>,
    inv_std: Vec<R>,
}

struct MishCache<R> {
    x: Matrix<R>,
    t: Matrix<R>,
    sig: Matrix<R>,
}

struct LayerCache<R> {
    mask: Option<Matrix<R>>,
    ln: Option<LnCache<R>>,
    mish: Option<MishCache<R>>,
    out: Matrix<R>,
}

/// Intermediates for one forward pass, consumed by [`Mlp::backward`].
pub struct MlpCache<R> {
    input: Matrix<R>,
    layers: Vec<LayerCache<R>>,
    spec_hash: u64,
}

impl<R: Real> MlpCache<R> {
    pub fn output(&self) -> &Matrix<R> {
        &self.layers.last().expect("non-empty mlp").out
    }
}

/// A parameterized multilayer map: spec + parameter store.
#[derive(Clone)]
pub struct Mlp<R> {
    spec: MlpSpec,
    params: ParamStore<R>,
}

impl<R: Real> Mlp<R> {
    /// Variance-scaled uniform fan-in init for weights, zero biases, unit
    /// layer-norm scale.
    pub fn init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut fan_in = spec.input;
        for (i, l) in spec.layers.iter().enumerate() {
            let bound = (1.0 / fan_in as f64).sqrt();
            let mut w = Matrix::zeros(fan_in, l.out);
            for v in w.data_mut() {
                *v = r((rng.gen::<f64>() * 2.0 - 1.0) * bound);
            }
            params.push(format!("l{i}.w"), w, true);
            params.push(format!("l{i}.b"), Matrix::zeros(1, l.out), true);
            if l.layer_norm {
                params.push(format!("l{i}.ln_g"), Matrix::filled(1, l.out, R::one()), true);
                params.push(format!("l{i}.ln_b"), Matrix::zeros(1, l.out), true);
            }
            fan_in = l.out;
        }
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.spec.input
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    /// Mark every group frozen (target networks).
    pub fn freeze(&mut self) {
        for g in self.params.iter_mut() {
            g.trainable = false;
        }
    }

    pub fn cast<T: Real>(&self) -> Mlp<T> {
        Mlp {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, input: &Matrix<R>) -> Result<()> {
        if input.cols() != self.spec.input {
            return Err(Error::shape("mlp input", self.spec.input, input.cols()));
        }
        Ok(())
    }

    fn param_index(&self, layer: usize) -> usize {
        // groups are laid out [w, b, (ln_g, ln_b)?] per layer
        let mut idx = 0;
        for l in &self.spec.layers[..layer] {
            idx += if l.layer_norm { 4 } else { 2 };
        }
        idx
    }

    /// Forward pass caching every intermediate needed for [`Self::backward`].
    /// Train mode samples dropout masks from `rng`; eval mode is deterministic.
    pub fn forward(
        &self,
        input: &Matrix<R>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Matrix<R>, MlpCache<R>)> {
        self.check_input(input)?;
        let mut layers = Vec::with_capacity(self.spec.layers.len());
        let mut x = input.clone();
        for (i, l) in self.spec.layers.iter().enumerate() {
            let pi = self.param_index(i);
            let w = &self.params.group(pi).value;
            let b = &self.params.group(pi + 1).value;
            let mut lin = matmul(&x, w);
            for row in 0..lin.rows() {
                for (v, &bj) in lin.row_mut(row).iter_mut().zip(b.row(0)) {
                    *v += bj;
                }
            }

            let mask = if l.dropout > 0.0 && mode == Mode::Train {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::Contract("train-mode dropout requires an rng".into()))?;
                let keep_scale = r::<R>(1.0 / (1.0 - l.dropout));
                let mut m = Matrix::zeros(lin.rows(), lin.cols());
                for v in m.data_mut() {
                    *v = if rng.gen::<f64>() < l.dropout {
                        R::zero()
                    } else {
                        keep_scale
                    };
                }
                for (v, &mv) in lin.data_mut().iter_mut().zip(m.data()) {
                    *v *= mv;
                }
                Some(m)
            } else {
                None
            };

            let ln = if l.layer_norm {
                let g = &self.params.group(pi + 2).value;
                let beta = &self.params.group(pi + 3).value;
                let d = lin.cols();
                let mut xhat = Matrix::zeros(lin.rows(), d);
                let mut inv_std = Vec::with_capacity(lin.rows());
                let dn = r::<R>(d as f64);
                for row in 0..lin.rows() {
                    let src = lin.row(row);
                    let mean = src.iter().copied().sum::<R>() / dn;
                    let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
                    let istd = (var + r(LAYER_NORM_EPS)).sqrt().recip();
                    inv_std.push(istd);
                    let xh = xhat.row_mut(row);
                    let dst = lin.row_mut(row);
                    for j in 0..d {
                        let h = (dst[j] - mean) * istd;
                        xh[j] = h;
                        dst[j] = g.row(0)[j] * h + beta.row(0)[j];
                    }
                }
                Some(LnCache { xhat, inv_std })
            } else {
                None
            };

            let (out, mish_cache) = match l.act {
                Activation::None => (lin, None),
                Activation::Mish => {
                    let mut t = Matrix::zeros(lin.rows(), lin.cols());
                    let mut sig = Matrix::zeros(lin.rows(), lin.cols());
                    let mut out = Matrix::zeros(lin.rows(), lin.cols());
                    for ((o, (tv, sv)), &xv) in out
                        .data_mut()
                        .iter_mut()
                        .zip(t.data_mut().iter_mut().zip(sig.data_mut().iter_mut()))
                        .zip(lin.data())
                    {
                        let (y, tt, ss) = mish_parts(xv);
                        *o = y;
                        *tv = tt;
                        *sv = ss;
                    }
                    (out, Some(MishCache { x: lin, t, sig }))
                }
                Activation::SimNorm { group } => {
                    let mut out = lin;
                    for row in 0..out.rows() {
                        for chunk in out.row_mut(row).chunks_mut(group) {
                            crate::math::softmax_inplace(chunk);
                        }
                    }
                    (out, None)
                }
            };

            layers.push(LayerCache {
                mask,
                ln,
                mish: mish_cache,
                out,
            });
            x = layers.last().unwrap().out.clone();
        }
        let cache = MlpCache {
            input: input.clone(),
            layers,
            spec_hash: self.spec.hash64(),
        };
        Ok((x, cache))
    }

    /// Deterministic eval-mode forward without gradient caches.
    pub fn eval(&self, input: &Matrix<R>) -> Result<Matrix<R>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for (i, l) in self.spec.layers.iter().enumerate() {
            let pi = self.param_index(i);
            let w = &self.params.group(pi).value;
            let b = &self.params.group(pi + 1).value;
            let mut lin = matmul(&x, w);
            for row in 0..lin.rows() {
                for (v, &bj) in lin.row_mut(row).iter_mut().zip(b.row(0)) {
                    *v += bj;
                }
            }
            if l.layer_norm {
                let g = &self.params.group(pi + 2).value;
                let beta = &self.params.group(pi + 3).value;
                let d = lin.cols();
                let dn = r::<R>(d as f64);
                for row in 0..lin.rows() {
                    let dst = lin.row_mut(row);
                    let mean = dst.iter().copied().sum::<R>() / dn;
                    let var = dst.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
                    let istd = (var + r(LAYER_NORM_EPS)).sqrt().recip();
                    for j in 0..d {
                        dst[j] = g.row(0)[j] * (dst[j] - mean) * istd + beta.row(0)[j];
                    }
                }
            }
            match l.act {
                Activation::None => {}
                Activation::Mish => {
                    for v in lin.data_mut() {
                        *v = mish(*v);
                    }
                }
                Activation::SimNorm { group } => {
                    for row in 0..lin.rows() {
                        for chunk in lin.row_mut(row).chunks_mut(group) {
                            crate::math::softmax_inplace(chunk);
                        }
                    }
                }
            }
            x = lin;
        }
        Ok(x)
    }

    /// Reverse pass. Accumulates parameter gradients into `grads` (a mirror of
    /// the parameter store; frozen groups are left untouched) and returns the
    /// gradient with respect to the input batch.
    pub fn backward_into(
        &self,
        cache: &MlpCache<R>,
        upstream: &Matrix<R>,
        grads: &mut ParamStore<R>,
    ) -> Result<Matrix<R>> {
        self.params.compatible_with(grads)?;
        self.backward_impl(cache, upstream, Some(grads))
    }

    /// Input gradient only; the network is treated as a constant map.
    pub fn backward_input(&self, cache: &MlpCache<R>, upstream: &Matrix<R>) -> Result<Matrix<R>> {
        self.backward_impl(cache, upstream, None)
    }

    fn backward_impl(
        &self,
        cache: &MlpCache<R>,
        upstream: &Matrix<R>,
        mut grads: Option<&mut ParamStore<R>>,
    ) -> Result<Matrix<R>> {
        if cache.spec_hash != self.spec.hash64() {
            return Err(Error::Contract(
                "forward cache does not match this network's spec".into(),
            ));
        }
        if cache.layers.len() != self.spec.layers.len() {
            return Err(Error::Contract("forward cache is incomplete".into()));
        }
        let out_shape = cache.layers.last().unwrap().out.shape();
        if upstream.shape() != out_shape {
            return Err(Error::shape(
                "mlp upstream gradient",
                format!("{:?}", out_shape),
                format!("{:?}", upstream.shape()),
            ));
        }

        let mut g = upstream.clone();
        for (i, l) in self.spec.layers.iter().enumerate().rev() {
            let lc = &cache.layers[i];
            let pi = self.param_index(i);

            match l.act {
                Activation::None => {}
                Activation::Mish => {
                    let mc = lc.mish.as_ref().expect("mish cache");
                    for (((gv, &x), &t), &sig) in g
                        .data_mut()
                        .iter_mut()
                        .zip(mc.x.data())
                        .zip(mc.t.data())
                        .zip(mc.sig.data())
                    {
                        *gv *= t + x * sig * (R::one() - t * t);
                    }
                }
                Activation::SimNorm { group } => {
                    for row in 0..g.rows() {
                        let s_row = lc.out.row(row);
                        let g_row = g.row_mut(row);
                        for (gc, sc) in g_row.chunks_mut(group).zip(s_row.chunks(group)) {
                            let dot: R = gc.iter().zip(sc).map(|(&gv, &sv)| gv * sv).sum();
                            for (gv, &sv) in gc.iter_mut().zip(sc) {
                                *gv = sv * (*gv - dot);
                            }
                        }
                    }
                }
            }

            if l.layer_norm {
                let ln = lc.ln.as_ref().expect("ln cache");
                let gamma = &self.params.group(pi + 2).value;
                let d = g.cols();
                let dn = r::<R>(d as f64);
                // accumulate dγ, dβ
                if let Some(grads) = grads.as_deref_mut() {
                    let trainable_g = grads.group(pi + 2).trainable;
                    let trainable_b = grads.group(pi + 3).trainable;
                    for row in 0..g.rows() {
                        let gr = g.row(row);
                        let xh = ln.xhat.row(row);
                        if trainable_g {
                            let dst = grads.group_mut(pi + 2).value.row_mut(0);
                            for j in 0..d {
                                dst[j] += gr[j] * xh[j];
                            }
                        }
                        if trainable_b {
                            let dst = grads.group_mut(pi + 3).value.row_mut(0);
                            for j in 0..d {
                                dst[j] += gr[j];
                            }
                        }
                    }
                }
                for row in 0..g.rows() {
                    let xh = ln.xhat.row(row);
                    let istd = ln.inv_std[row];
                    let gr = g.row_mut(row);
                    let mut mean_dxhat = R::zero();
                    let mut mean_dxhat_xhat = R::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gamma.row(0)[j];
                        gr[j] = dxh;
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= dn;
                    mean_dxhat_xhat /= dn;
                    for j in 0..d {
                        gr[j] = istd * (gr[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }

            if let Some(mask) = &lc.mask {
                for (gv, &mv) in g.data_mut().iter_mut().zip(mask.data()) {
                    *gv *= mv;
                }
            }

            let layer_input = if i == 0 {
                &cache.input
            } else {
                &cache.layers[i - 1].out
            };
            if let Some(grads) = grads.as_deref_mut() {
                if grads.group(pi).trainable {
                    let dw = matmul_tn(layer_input, &g);
                    grads.group_mut(pi).value.add_assign(&dw);
                }
                if grads.group(pi + 1).trainable {
                    let db = grads.group_mut(pi + 1).value.row_mut(0);
                    for row in 0..g.rows() {
                        for (d, &gv) in db.iter_mut().zip(g.row(row)) {
                            *d += gv;
                        }
                    }
                }
            }
            let w = &self.params.group(pi).value;
            g = matmul_nt(&g, w);
        }
        Ok(g)
    }

    /// Convenience wrapper returning freshly allocated gradients.
    pub fn backward(
        &self,
        cache: &MlpCache<R>,
        upstream: &Matrix<R>,
    ) -> Result<(ParamStore<R>, Matrix<R>)> {
        let mut grads = self.params.zeros_like();
        let input_grad = self.backward_into(cache, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }
}

/// `base_lr · γ^⌊step / schedule⌋` (step-decay schedule).
pub fn step_lr(global_step: u64, base_lr: f64, schedule_step: u64, gamma_lr: f64) -> f64 {
    assert!(schedule_step > 0, "schedule_step must be positive");
    base_lr * gamma_lr.powi((global_step / schedule_step) as i32)
}

/// In-place convex blend `target ← (1−τ)·target + τ·online` per parameter.
pub fn soft_update<R: Real>(online: &ParamStore<R>, target: &mut ParamStore<R>, tau: R) -> Result<()> {
    if tau < R::zero() || tau > R::one() {
        return Err(Error::Config(format!("soft-update tau {tau} outside [0,1]")));
    }
    online.compatible_with(target)?;
    let keep = R::one() - tau;
    for (src, dst) in online.iter().zip(target.iter_mut()) {
        for (s, d) in src.value.data().iter().zip(dst.value.data_mut()) {
            *d = keep * *d + tau * *s;
        }
    }
    Ok(())
}

/// Adaptive-moment optimizer over a parameter store. Moments are kept for
/// every group; frozen groups are skipped so they stay bit-identical.
pub struct Adam<R> {
    beta1: R,
    beta2: R,
    eps: R,
    t: u64,
    m: Vec<Matrix<R>>,
    v: Vec<Matrix<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(params: &ParamStore<R>) -> Self {
        Adam::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore<R>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1: r(beta1),
            beta2: r(beta2),
            eps: r(eps),
            t: 0,
            m: params
                .iter()
                .map(|g| Matrix::zeros(g.value.rows(), g.value.cols()))
                .collect(),
            v: params
                .iter()
                .map(|g| Matrix::zeros(g.value.rows(), g.value.cols()))
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. Rejects non-finite gradients naming the offending group and
    /// guarantees parameters stay finite.
    pub fn step(&mut self, params: &mut ParamStore<R>, grads: &ParamStore<R>, lr: R) -> Result<()> {
        params.compatible_with(grads)?;
        for g in grads.iter() {
            if g.trainable && !g.value.all_finite() {
                return Err(Error::NonFinite {
                    context: "optimizer gradient".into(),
                    group: g.name.clone(),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = R::one() - self.beta1.powi(t);
        let bc2 = R::one() - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let gr = &grads.group(i).value;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, &gv), (mv, vv)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(gr.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (R::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (R::one() - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite {
                    context: "optimizer update".into(),
                    group: p.name.clone(),
                });
            }
        }
        Ok(())
    }

    /// Moment arrays flattened for checkpointing, one `(name, matrix)` pair
    /// per group and moment.
    pub fn state_arrays(&self) -> Vec<(String, &Matrix<R>)> {
        let mut out = Vec::new();
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("m{i}"), m));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("v{i}"), v));
        }
        out
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<Matrix<R>>, v: Vec<Matrix<R>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Format("optimizer state group count mismatch".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
