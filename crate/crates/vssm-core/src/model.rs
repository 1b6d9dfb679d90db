//! The variational state-space model: uniform discrete prior, categorical
//! posterior, categorical partial posterior, Gaussian decoder, and the two
//! training objectives (ELBO and partial-posterior cross-entropy).
//!
//! Latents are one categorical draw per (timestep, component): Z components
//! of N categories each, per step. Logit tensors are laid out [t, Z*N]
//! (component-major inside a row) and reshaped to [t*Z, N] wherever a
//! per-component softmax is taken.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::real::{Real, LN_SQRT_2PI};
use crate::rng::{RngKey, Role};
use crate::ssm::{ScanMode, StackConfig, StackedSsm};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// ── Hyperparameters ─────────────────────────────────────────────────

/// Model sizes and fixed distribution parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VssmHyper {
    /// Sequence length T.
    pub t_len: usize,
    /// Observation dimension D per step.
    pub obs_dim: usize,
    /// Latent components Z per step.
    pub z_comp: usize,
    /// Categories N per component.
    pub n_cat: usize,
    /// Fixed Gaussian output standard deviation.
    pub sigma: f64,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    pub width: usize,
    pub state: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl VssmHyper {
    pub fn validate(&self) -> Result<()> {
        if self.n_cat < 2 {
            return Err(Error::usage("n_cat must be at least 2"));
        }
        if self.z_comp < 1 || self.t_len < 1 || self.obs_dim < 1 {
            return Err(Error::usage("t_len, obs_dim and z_comp must be positive"));
        }
        if !(self.sigma > 0.0) || !(self.tau > 0.0) {
            return Err(Error::usage("sigma and tau must be positive"));
        }
        Ok(())
    }

    /// Flattened one-hot width Z*N.
    pub fn latent_dim(&self) -> usize {
        self.z_comp * self.n_cat
    }

    pub fn decoder_config(&self) -> StackConfig {
        StackConfig {
            input_dim: self.latent_dim(),
            output_dim: self.obs_dim,
            width: self.width,
            state: self.state,
            hidden: self.hidden,
            layers: self.layers,
        }
    }

    pub fn posterior_config(&self) -> StackConfig {
        StackConfig {
            input_dim: self.obs_dim,
            output_dim: self.latent_dim(),
            width: self.width,
            state: self.state,
            hidden: self.hidden,
            layers: self.layers,
        }
    }

    /// The partial stack sees the observation plus an observed-mask channel.
    pub fn partial_config(&self) -> StackConfig {
        StackConfig {
            input_dim: self.obs_dim + 1,
            output_dim: self.latent_dim(),
            width: self.width,
            state: self.state,
            hidden: self.hidden,
            layers: self.layers,
        }
    }
}

// ── Latents and prompts ─────────────────────────────────────────────

/// A latent assignment z_{1:T}: category indices per (t, component), with
/// an optional relaxed one-hot form carrying gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<S: Real = f32> {
    /// [t * Z] category indices, each in [0, N).
    pub indices: Vec<u32>,
    pub t_len: usize,
    pub z_comp: usize,
    pub n_cat: usize,
    /// Optional relaxed per-component simplex values, [t, Z*N].
    pub relaxed: Option<Tensor<S>>,
}

impl<S: Real> LatentSequence<S> {
    pub fn from_indices(indices: Vec<u32>, t_len: usize, z_comp: usize, n_cat: usize) -> Result<Self> {
        if indices.len() != t_len * z_comp {
            return Err(Error::usage("latent index count must be t_len * z_comp"));
        }
        if indices.iter().any(|&i| i as usize >= n_cat) {
            return Err(Error::usage("latent index out of category range"));
        }
        Ok(LatentSequence {
            indices,
            t_len,
            z_comp,
            n_cat,
            relaxed: None,
        })
    }

    /// Flattened exact one-hot encoding, [t, Z*N].
    pub fn one_hot(&self) -> Tensor<S> {
        let zn = self.z_comp * self.n_cat;
        let mut data = vec![S::ZERO; self.t_len * zn];
        for t in 0..self.t_len {
            for z in 0..self.z_comp {
                let idx = self.indices[t * self.z_comp + z] as usize;
                data[t * zn + z * self.n_cat + idx] = S::ONE;
            }
        }
        Tensor::new(&[self.t_len, zn], data).unwrap()
    }
}

/// A prompt x_{1:C} padded to length T with the empty token: zeros in the
/// observation channels and 0 in the trailing observed-mask channel
/// (observed rows carry mask 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedPrompt<S: Real = f32> {
    /// Observed rows, [c, D].
    pub observed: Tensor<S>,
    pub c: usize,
    pub t_len: usize,
    pub obs_dim: usize,
}

impl<S: Real> PaddedPrompt<S> {
    pub fn new(observed: Tensor<S>, t_len: usize) -> Result<Self> {
        let shape = observed.shape();
        if shape.len() != 2 {
            return Err(Error::usage("prompt must be [c, obs_dim]"));
        }
        let (c, obs_dim) = (shape[0], shape[1]);
        if c > t_len {
            return Err(Error::usage("prompt length exceeds sequence length"));
        }
        Ok(PaddedPrompt {
            observed,
            c,
            t_len,
            obs_dim,
        })
    }

    /// First `c` rows of a full sequence.
    pub fn from_cut(x: &Tensor<S>, c: usize) -> Result<Self> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::usage("sequence must be [t, obs_dim]"));
        }
        if c > shape[0] {
            return Err(Error::usage("cut beyond sequence length"));
        }
        let obs_dim = shape[1];
        let observed = Tensor::new(&[c, obs_dim], x.data()[..c * obs_dim].to_vec())?;
        PaddedPrompt::new(observed, shape[0])
    }

    pub fn empty(t_len: usize, obs_dim: usize) -> Self {
        PaddedPrompt {
            observed: Tensor::zeros(&[0, obs_dim]),
            c: 0,
            t_len,
            obs_dim,
        }
    }

    /// Mask-channel encoding, [t_len, D+1]: (x_t, 1) for observed rows,
    /// (0, ..., 0) past the cut.
    pub fn encoded(&self) -> Tensor<S> {
        let d = self.obs_dim;
        let mut data = vec![S::ZERO; self.t_len * (d + 1)];
        for t in 0..self.c {
            let row = &self.observed.data()[t * d..(t + 1) * d];
            data[t * (d + 1)..t * (d + 1) + d].copy_from_slice(row);
            data[t * (d + 1) + d] = S::ONE;
        }
        Tensor::new(&[self.t_len, d + 1], data).unwrap()
    }

    /// Encoding of `rows` empty positions, for chunked continuation.
    pub fn empty_rows(rows: usize, obs_dim: usize) -> Tensor<S> {
        Tensor::zeros(&[rows, obs_dim + 1])
    }
}

// ── The model ───────────────────────────────────────────────────────

/// Decoder (phi), posterior encoder (psi) and partial-posterior encoder
/// (omega), each a stacked SSM, plus the shared hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Vssm<S: Real = f32> {
    pub hyper: VssmHyper,
    pub decoder: StackedSsm<S>,
    pub posterior: StackedSsm<S>,
    pub partial: StackedSsm<S>,
}

/// ELBO value and its two diagnostics; elbo = reconstruction - kl.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboOutput {
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Tape handles for the ELBO and its pieces, for composition into a
/// training loss.
pub struct ElboVars {
    pub elbo: Var,
    pub reconstruction: Var,
    pub kl: Var,
    /// Posterior logits, [t, Z*N]; reused by the partial-posterior term.
    pub posterior_logits: Var,
}

impl<S: Real> Vssm<S> {
    pub fn init(hyper: VssmHyper, key: RngKey) -> Result<Self> {
        hyper.validate()?;
        Ok(Vssm {
            hyper,
            decoder: StackedSsm::init(hyper.decoder_config(), key.child(0)),
            posterior: StackedSsm::init(hyper.posterior_config(), key.child(1)),
            partial: StackedSsm::init(hyper.partial_config(), key.child(2)),
        })
    }

    fn check_sequence(&self, x: &Tensor<S>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] != self.hyper.t_len || shape[1] != self.hyper.obs_dim {
            return Err(Error::usage("sequence must be [t_len, obs_dim]"));
        }
        Ok(())
    }

    /// Posterior logits v_{1:T} from a full sequence; row t depends only
    /// on x_{1:t}. Shape [t, Z*N].
    pub fn encode_posterior(&self, x: &Tensor<S>, mode: ScanMode) -> Result<Tensor<S>> {
        self.check_sequence(x)?;
        let (v, _) = self.posterior.forward(x, None, mode)?;
        Ok(v)
    }

    /// Partial-posterior logits from a padded prompt; row t depends only
    /// on x_{1:min(C,t)}.
    pub fn encode_partial(&self, prompt: &PaddedPrompt<S>, mode: ScanMode) -> Result<Tensor<S>> {
        if prompt.c > prompt.t_len || prompt.t_len != self.hyper.t_len {
            return Err(Error::usage("prompt does not match model length"));
        }
        if prompt.obs_dim != self.hyper.obs_dim {
            return Err(Error::usage("prompt dimension mismatch"));
        }
        let (v, _) = self.partial.forward(&prompt.encoded(), None, mode)?;
        Ok(v)
    }

    /// Gaussian means w_{1:T} for a latent assignment; row t depends only
    /// on z_{1:t}.
    pub fn decode(&self, z: &LatentSequence<S>, mode: ScanMode) -> Result<Tensor<S>> {
        if z.t_len != self.hyper.t_len
            || z.z_comp != self.hyper.z_comp
            || z.n_cat != self.hyper.n_cat
        {
            return Err(Error::usage("latent sequence does not match model"));
        }
        if z.indices.iter().any(|&i| i as usize >= self.hyper.n_cat) {
            return Err(Error::usage("latent index out of category range"));
        }
        let input = match &z.relaxed {
            Some(r) => r.clone(),
            None => z.one_hot(),
        };
        let (w, _) = self.decoder.forward(&input, None, mode)?;
        Ok(w)
    }

    /// Uniform-prior log-probability: -T*Z*ln N, independent of z values.
    pub fn prior_log_prob(&self, z: &LatentSequence<S>) -> Result<f64> {
        if z.indices.iter().any(|&i| i as usize >= self.hyper.n_cat) {
            return Err(Error::usage("latent index out of category range"));
        }
        Ok(prior_log_prob_value(&self.hyper))
    }

    /// Runs all parameters through the visitor, prefixed dec/post/par.
    pub fn visit_params(&self, f: &mut impl FnMut(alloc::string::String, &Tensor<S>)) {
        self.decoder.visit_params("dec", f);
        self.posterior.visit_params("post", f);
        self.partial.visit_params("par", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(alloc::string::String, &mut Tensor<S>)) {
        self.decoder.visit_params_mut("dec", f);
        self.posterior.visit_params_mut("post", f);
        self.partial.visit_params_mut("par", f);
    }

    pub fn cast<T: Real>(&self) -> Vssm<T> {
        Vssm {
            hyper: self.hyper,
            decoder: self.decoder.cast(),
            posterior: self.posterior.cast(),
            partial: self.partial.cast(),
        }
    }

    /// Same weights, different sequence length. The stacks are
    /// length-agnostic; t_len only pins the shapes the model accepts.
    pub fn with_t_len(&self, t_len: usize) -> Vssm<S> {
        let mut out = self.clone();
        out.hyper.t_len = t_len;
        out
    }
}

/// -T*Z*ln N without a latent in hand.
pub fn prior_log_prob_value(hyper: &VssmHyper) -> f64 {
    -((hyper.t_len * hyper.z_comp) as f64) * libm::log(hyper.n_cat as f64)
}

// ── Closed-form pieces ──────────────────────────────────────────────

/// Exact KL(D(.|logits) || Uniform(N)) summed over the rows of a
/// [rows, N] logit tensor: sum_rows (ln N - H(softmax(row))).
pub fn kl_to_uniform<S: Real>(logits: &Tensor<S>) -> f64 {
    let shape = logits.shape();
    let n = shape[shape.len() - 1];
    let rows = logits.numel() / n;
    let data: Vec<f64> = logits.data().iter().map(|v| v.to_f64()).collect();
    let lsm = kernels::log_softmax_rows(&data, rows, n);
    let mut total = 0.0;
    let ln_n = libm::log(n as f64);
    for r in 0..rows {
        let mut neg_h = 0.0;
        for j in 0..n {
            let lp = lsm[r * n + j];
            neg_h += libm::exp(lp) * lp;
        }
        total += ln_n + neg_h;
    }
    total
}

/// Log-density of an isotropic Gaussian N(w, sigma^2 I) at x, summed over
/// the dimension.
pub fn gaussian_log_prob<S: Real>(x: &[S], w: &[S], sigma: f64) -> f64 {
    debug_assert_eq!(x.len(), w.len());
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let norm = libm::log(sigma) + LN_SQRT_2PI;
    let mut total = 0.0;
    for (a, b) in x.iter().zip(w) {
        let d = a.to_f64() - b.to_f64();
        total -= d * d * inv_two_var;
    }
    total - x.len() as f64 * norm
}

// ── Gumbel machinery ────────────────────────────────────────────────

/// Standard Gumbel noise for every (t, component, category) cell, shaped
/// [t*Z, N]; cell (t, z, k) comes from stream (role, t, z), draw k.
pub fn gumbel_noise_tensor<S: Real>(
    key: RngKey,
    role: Role,
    t_len: usize,
    z_comp: usize,
    n_cat: usize,
) -> Tensor<S> {
    let mut data = vec![S::ZERO; t_len * z_comp * n_cat];
    for t in 0..t_len {
        for z in 0..z_comp {
            let s = key.stream(role, t as u32, z as u32);
            for k in 0..n_cat {
                data[(t * z_comp + z) * n_cat + k] = S::from_f64(s.gumbel(k as u64));
            }
        }
    }
    Tensor::new(&[t_len * z_comp, n_cat], data).unwrap()
}

impl<S: Real> Tape<S> {
    /// Gumbel-softmax sample per trailing axis of [rows, N] logits:
    /// softmax((logits + g) / temperature), optionally hardened to an
    /// exact one-hot with a straight-through gradient. `noise` must hold
    /// standard Gumbel draws of the same shape.
    pub fn gumbel_softmax(
        &mut self,
        logits: Var,
        temperature: S,
        hard: bool,
        noise: &Tensor<S>,
    ) -> Result<Var> {
        if !(temperature > S::ZERO) {
            return Err(Error::usage("gumbel temperature must be positive"));
        }
        if !self.value(logits).all_finite() {
            return Err(Error::numeric("gumbel logits must be finite"));
        }
        if self.value(logits).numel() != noise.numel() {
            return Err(Error::usage("gumbel noise shape mismatch"));
        }
        let g = self.constant(noise.clone());
        let pert = self.add(logits, g);
        let scaled = self.scale(pert, S::ONE / temperature);
        let relaxed = self.softmax(scaled);
        Ok(if hard {
            self.straight_through(relaxed)
        } else {
            relaxed
        })
    }
}

// ── Objectives ──────────────────────────────────────────────────────

/// Options shared by the tape-built objectives.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveCfg {
    /// Hard (straight-through) or relaxed posterior sample into the decoder.
    pub hard: bool,
    pub mode: ScanMode,
}

impl Default for ObjectiveCfg {
    fn default() -> Self {
        ObjectiveCfg {
            hard: true,
            mode: ScanMode::Sequential,
        }
    }
}

impl<S: Real> Vssm<S> {
    /// Records the single-sample ELBO on `tape`: reconstruction under one
    /// Gumbel-reparametrized posterior draw minus the closed-form KL to
    /// the uniform prior. Differentiable in decoder and posterior
    /// parameters. `noise` freezes the Gumbel draw.
    pub fn elbo_tape(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
        noise: &Tensor<S>,
        cfg: ObjectiveCfg,
    ) -> Result<ElboVars> {
        self.check_sequence(x)?;
        let h = &self.hyper;
        let (t_len, zn) = (h.t_len, h.latent_dim());

        let x_var = tape.constant(x.clone());
        let v = self.posterior.forward_tape(tape, "post", x_var, cfg.mode);
        let v_rows = tape.reshape(v, &[t_len * h.z_comp, h.n_cat]);

        let z = tape.gumbel_softmax(v_rows, S::from_f64(h.tau), cfg.hard, noise)?;
        let z_flat = tape.reshape(z, &[t_len, zn]);
        let w = self.decoder.forward_tape(tape, "dec", z_flat, cfg.mode);

        // Reconstruction: sum_t log N(x_t | w_t, sigma^2 I).
        let diff = tape.sub(w, x_var);
        let sq = tape.mul_elem(diff, diff);
        let ssq = tape.sum_all(sq);
        let scaled = tape.scale(ssq, S::from_f64(-1.0 / (2.0 * h.sigma * h.sigma)));
        let norm = (t_len * h.obs_dim) as f64 * (libm::log(h.sigma) + LN_SQRT_2PI);
        let reconstruction = tape.add_const(scaled, S::from_f64(-norm));

        // KL: sum over (t, z) rows of ln N - H(softmax(v_row)).
        let lsm = tape.log_softmax(v_rows);
        let p = tape.exp(lsm);
        let plogp = tape.mul_elem(p, lsm);
        let s = tape.sum_all(plogp);
        let kl_const = (t_len * h.z_comp) as f64 * libm::log(h.n_cat as f64);
        let kl = tape.add_const(s, S::from_f64(kl_const));

        let elbo = tape.sub(reconstruction, kl);
        Ok(ElboVars {
            elbo,
            reconstruction,
            kl,
            posterior_logits: v,
        })
    }

    /// Single-sample ELBO value with diagnostics; elbo = reconstruction - kl
    /// by construction.
    pub fn elbo(&self, x: &Tensor<S>, key: RngKey, cfg: ObjectiveCfg) -> Result<ElboOutput> {
        let h = &self.hyper;
        let noise = gumbel_noise_tensor(key, Role::GumbelPosterior, h.t_len, h.z_comp, h.n_cat);
        let mut tape = Tape::new();
        let vars = self.elbo_tape(&mut tape, x, &noise, cfg)?;
        let out = ElboOutput {
            elbo: tape.value(vars.elbo).data()[0].to_f64(),
            reconstruction: tape.value(vars.reconstruction).data()[0].to_f64(),
            kl: tape.value(vars.kl).data()[0].to_f64(),
        };
        if !out.elbo.is_finite() {
            return Err(Error::numeric("non-finite elbo"));
        }
        Ok(out)
    }

    /// Records the partial-posterior objective on `tape`: the negative
    /// log-probability under q_omega(.|x_{1:C}) of one hard posterior
    /// sample z ~ q_psi(.|x_{1:T}). The sample enters as a constant, so
    /// gradients reach only the partial stack.
    pub fn partial_loss_tape(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
        posterior_logits: Var,
        c: usize,
        noise: &Tensor<S>,
        cfg: ObjectiveCfg,
    ) -> Result<Var> {
        let h = &self.hyper;
        if c > h.t_len {
            return Err(Error::usage("cut exceeds sequence length"));
        }
        let rows = h.t_len * h.z_comp;

        // Hard posterior sample via the Gumbel-max trick, detached.
        let logits = tape.value(posterior_logits).data();
        let mut onehot = vec![S::ZERO; rows * h.n_cat];
        for r in 0..rows {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for k in 0..h.n_cat {
                let v = logits[r * h.n_cat + k].to_f64() + noise.data()[r * h.n_cat + k].to_f64();
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            onehot[r * h.n_cat + best] = S::ONE;
        }
        let onehot = tape.constant(Tensor::new(&[rows, h.n_cat], onehot)?);

        let prompt = PaddedPrompt::from_cut(x, c)?;
        let enc = tape.constant(prompt.encoded());
        let v_bar = self.partial.forward_tape(tape, "par", enc, cfg.mode);
        let v_bar_rows = tape.reshape(v_bar, &[rows, h.n_cat]);
        let lsm = tape.log_softmax(v_bar_rows);
        let picked = tape.mul_elem(lsm, onehot);
        let total = tape.sum_all(picked);
        Ok(tape.scale(total, -S::ONE))
    }

    /// Value of the partial-posterior objective for one random cut.
    pub fn partial_posterior_loss(
        &self,
        x: &Tensor<S>,
        c: usize,
        key: RngKey,
        cfg: ObjectiveCfg,
    ) -> Result<f64> {
        let h = &self.hyper;
        let noise = gumbel_noise_tensor(key, Role::GumbelTarget, h.t_len, h.z_comp, h.n_cat);
        let mut tape = Tape::new();
        let x_var = tape.constant(x.clone());
        let v = self.posterior.forward_tape(&mut tape, "post", x_var, cfg.mode);
        let loss = self.partial_loss_tape(&mut tape, x, v, c, &noise, cfg)?;
        Ok(tape.value(loss).data()[0].to_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngKey;

    pub(crate) fn tiny_hyper() -> VssmHyper {
        VssmHyper {
            t_len: 4,
            obs_dim: 3,
            z_comp: 2,
            n_cat: 3,
            sigma: 0.1,
            tau: 1.0,
            width: 4,
            state: 2,
            hidden: 5,
            layers: 2,
        }
    }

    fn random_seq(key: RngKey, t_len: usize, d: usize) -> Tensor<f32> {
        let s = key.stream(Role::Init, 40, 0);
        Tensor::new(
            &[t_len, d],
            (0..t_len * d)
                .map(|i| s.uniform(i as u64) as f32)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn prior_closed_form_and_uniformity() {
        let mut h = tiny_hyper();
        h.t_len = 4;
        h.z_comp = 3;
        h.n_cat = 2;
        let model: Vssm<f32> = Vssm::init(h, RngKey::new(1)).unwrap();
        let z1 = LatentSequence::from_indices(vec![0; 12], 4, 3, 2).unwrap();
        let z2 = LatentSequence::from_indices(vec![1; 12], 4, 3, 2).unwrap();
        let lp1 = model.prior_log_prob(&z1).unwrap();
        let lp2 = model.prior_log_prob(&z2).unwrap();
        assert!((lp1 - (-12.0 * libm::log(2.0))).abs() < 1e-12);
        assert_eq!(lp1, lp2);
    }

    #[test]
    fn prior_normalizes_over_enumerable_space() {
        // N=2, Z=1, T=3: 8 sequences, each mass 1/8.
        let mut h = tiny_hyper();
        h.t_len = 3;
        h.z_comp = 1;
        h.n_cat = 2;
        let model: Vssm<f32> = Vssm::init(h, RngKey::new(2)).unwrap();
        let mut total = 0.0;
        for bits in 0..8u32 {
            let idx: Vec<u32> = (0..3).map(|t| (bits >> t) & 1).collect();
            let z = LatentSequence::from_indices(idx, 3, 1, 2).unwrap();
            total += libm::exp(model.prior_log_prob(&z).unwrap());
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_to_uniform_edge_cases() {
        // Uniform logits: zero KL.
        let uniform = Tensor::<f32>::zeros(&[2, 5]);
        assert!(kl_to_uniform(&uniform).abs() < 1e-12);

        // One near-deterministic component: KL ~= ln N for that component.
        let mut logits = Tensor::<f32>::zeros(&[2, 5]);
        logits.data_mut()[0] = 1000.0;
        let kl = kl_to_uniform(&logits);
        assert!((kl - libm::log(5.0)).abs() < 1e-6, "kl {kl}");
    }

    #[test]
    fn kl_matches_direct_summation() {
        let key = RngKey::new(12);
        for case in 0..50u64 {
            let n = 2 + (key.stream(Role::Init, 50, case as u32).below(0, 31)) as usize;
            let s = key.stream(Role::Init, 51, case as u32);
            let logits = Tensor::<f32>::new(
                &[2, n],
                (0..2 * n)
                    .map(|i| (s.uniform(i as u64) * 8.0 - 4.0) as f32)
                    .collect(),
            )
            .unwrap();
            let kl = kl_to_uniform(&logits);

            // Direct: sum_k p_k * log(p_k * N), in double precision.
            let mut direct = 0.0;
            for r in 0..2 {
                let row: Vec<f64> = (0..n).map(|j| logits.data()[r * n + j] as f64).collect();
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let zsum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                for j in 0..n {
                    let p = (row[j] - mx).exp() / zsum;
                    direct += p * (p * n as f64).ln();
                }
            }
            assert!((kl - direct).abs() < 1e-6, "case {case}: {kl} vs {direct}");
            assert!(kl >= -1e-9);
        }
    }

    #[test]
    fn gaussian_log_prob_closed_form() {
        // Zero residual, D=1, sigma=0.1.
        let lp = gaussian_log_prob(&[0.7f32], &[0.7f32], 0.1);
        assert!((lp - 1.3836465597893728).abs() < 1e-9, "{lp}");

        // Random x, w in f64 against the direct formula.
        let key = RngKey::new(13);
        let s = key.stream(Role::Init, 60, 0);
        let x: Vec<f64> = (0..10).map(|i| s.uniform(i)).collect();
        let w: Vec<f64> = (10..20).map(|i| s.uniform(i)).collect();
        let lp = gaussian_log_prob(&x, &w, 0.1);
        let direct: f64 = x
            .iter()
            .zip(&w)
            .map(|(a, b)| {
                let d = a - b;
                -d * d / 0.02 - (0.1f64.ln() + LN_SQRT_2PI)
            })
            .sum();
        assert!((lp - direct).abs() < 1e-9);
    }

    #[test]
    fn elbo_diagnostics_sum_check() {
        let model: Vssm<f32> = Vssm::init(tiny_hyper(), RngKey::new(3)).unwrap();
        let x = random_seq(RngKey::new(4), 4, 3);
        let out = model
            .elbo(&x, RngKey::new(5), ObjectiveCfg::default())
            .unwrap();
        assert!((out.elbo - (out.reconstruction - out.kl)).abs() < 1e-3_f64.max(out.elbo.abs() * 1e-6));
    }

    #[test]
    fn uniform_posterior_gives_zero_kl() {
        let mut model: Vssm<f32> = Vssm::init(tiny_hyper(), RngKey::new(6)).unwrap();
        // Zero the posterior head: logits become exactly zero.
        for v in model.posterior.head_w.data_mut() {
            *v = 0.0;
        }
        for v in model.posterior.head_b.data_mut() {
            *v = 0.0;
        }
        let x = random_seq(RngKey::new(7), 4, 3);
        let out = model
            .elbo(&x, RngKey::new(8), ObjectiveCfg::default())
            .unwrap();
        assert!(out.kl.abs() < 1e-5, "kl {}", out.kl);
        assert!((out.elbo - out.reconstruction).abs() < 1e-4);
    }

    #[test]
    fn posterior_is_causal() {
        let model: Vssm<f32> = Vssm::init(tiny_hyper(), RngKey::new(9)).unwrap();
        let x = random_seq(RngKey::new(10), 4, 3);
        let v = model.encode_posterior(&x, ScanMode::Sequential).unwrap();
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[2 * 3..] {
            *v += 1.0;
        }
        let v2 = model.encode_posterior(&x2, ScanMode::Sequential).unwrap();
        let zn = 6;
        assert_eq!(v.data()[..2 * zn], v2.data()[..2 * zn]);
        assert_ne!(v.data()[2 * zn..], v2.data()[2 * zn..]);
    }

    #[test]
    fn partial_with_no_prompt_ignores_observations() {
        let model: Vssm<f32> = Vssm::init(tiny_hyper(), RngKey::new(11)).unwrap();
        let a = PaddedPrompt::from_cut(&random_seq(RngKey::new(14), 4, 3), 0).unwrap();
        let b = PaddedPrompt::empty(4, 3);
        let va = model.encode_partial(&a, ScanMode::Sequential).unwrap();
        let vb = model.encode_partial(&b, ScanMode::Sequential).unwrap();
        assert_eq!(va.data(), vb.data());
    }

    #[test]
    fn partial_prefix_determines_prefix_logits() {
        let model: Vssm<f32> = Vssm::init(tiny_hyper(), RngKey::new(15)).unwrap();
        let x1 = random_seq(RngKey::new(16), 4, 3);
        let mut x2 = x1.clone();
        for v in &mut x2.data_mut()[2 * 3..] {
            *v = 0.9;
        }
        let c = 2;
        let p1 = PaddedPrompt::from_cut(&x1, c).unwrap();
        let p2 = PaddedPrompt::from_cut(&x2, c).unwrap();
        let v1 = model.encode_partial(&p1, ScanMode::Sequential).unwrap();
        let v2 = model.encode_partial(&p2, ScanMode::Sequential).unwrap();
        assert_eq!(v1.data(), v2.data());
    }

    #[test]
    fn decoder_is_deterministic_and_validates_indices() {
        let model: Vssm<f32> = Vssm::init(tiny_hyper(), RngKey::new(17)).unwrap();
        let z = LatentSequence::from_indices(vec![0, 1, 2, 0, 1, 2, 0, 1], 4, 2, 3).unwrap();
        let w1 = model.decode(&z, ScanMode::Sequential).unwrap();
        let w2 = model.decode(&z, ScanMode::Sequential).unwrap();
        assert_eq!(w1.data(), w2.data());

        assert!(LatentSequence::<f32>::from_indices(vec![3; 8], 4, 2, 3).is_err());
    }

    #[test]
    fn gumbel_softmax_contract() {
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[4, 5]));
        let noise = gumbel_noise_tensor::<f32>(RngKey::new(18), Role::GumbelPosterior, 2, 2, 5);

        // Temperature must be positive.
        assert!(tape.gumbel_softmax(logits, 0.0, false, &noise).is_err());

        // Soft slices sum to 1.
        let soft = tape.gumbel_softmax(logits, 1.0, false, &noise).unwrap();
        for r in 0..4 {
            let s: f32 = tape.value(soft).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }

        // Hard slices are exact one-hots.
        let hard = tape.gumbel_softmax(logits, 1.0, true, &noise).unwrap();
        for r in 0..4 {
            let row = tape.value(hard).row(r);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 4);
        }

        // Non-finite logits are a numeric error.
        let bad = tape.constant(Tensor::new(&[1, 5], vec![f32::NAN, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let noise1 = Tensor::<f32>::zeros(&[1, 5]);
        assert!(matches!(
            tape.gumbel_softmax(bad, 1.0, false, &noise1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn cold_gumbel_argmax_matches_perturbed_logits() {
        let key = RngKey::new(19);
        let s = key.stream(Role::Init, 70, 0);
        let logits_t =
            Tensor::<f32>::new(&[3, 4], (0..12).map(|i| (s.uniform(i) * 4.0 - 2.0) as f32).collect())
                .unwrap();
        let noise = gumbel_noise_tensor::<f32>(key, Role::GumbelPosterior, 3, 1, 4);
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.constant(logits_t.clone());
        let relaxed = tape.gumbel_softmax(logits, 1e-3, false, &noise).unwrap();
        for r in 0..3 {
            let row = tape.value(relaxed).row(r);
            let soft_arg = (0..4).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            let pert: Vec<f32> = (0..4)
                .map(|j| logits_t.data()[r * 4 + j] + noise.data()[r * 4 + j])
                .collect();
            let hard_arg = (0..4)
                .max_by(|&a, &b| pert[a].partial_cmp(&pert[b]).unwrap())
                .unwrap();
            assert_eq!(soft_arg, hard_arg);
        }
    }

    #[test]
    fn partial_loss_is_nonnegative_and_validates_cut() {
        let model: Vssm<f32> = Vssm::init(tiny_hyper(), RngKey::new(20)).unwrap();
        let x = random_seq(RngKey::new(21), 4, 3);
        for c in 0..=4 {
            let loss = model
                .partial_posterior_loss(&x, c, RngKey::new(22), ObjectiveCfg::default())
                .unwrap();
            assert!(loss >= 0.0, "c={c} loss={loss}");
        }
        assert!(model
            .partial_posterior_loss(&x, 5, RngKey::new(22), ObjectiveCfg::default())
            .is_err());
    }

    #[test]
    fn matched_uniform_stacks_hit_the_entropy_floor() {
        // If q_omega equals q_psi exactly (both uniform here) and C = T, the
        // loss is the posterior's entropy: T*Z*ln N.
        let mut model: Vssm<f32> = Vssm::init(tiny_hyper(), RngKey::new(23)).unwrap();
        for stack in [&mut model.posterior, &mut model.partial] {
            for v in stack.head_w.data_mut() {
                *v = 0.0;
            }
            for v in stack.head_b.data_mut() {
                *v = 0.0;
            }
        }
        let x = random_seq(RngKey::new(24), 4, 3);
        let loss = model
            .partial_posterior_loss(&x, 4, RngKey::new(25), ObjectiveCfg::default())
            .unwrap();
        let floor = (4 * 2) as f64 * libm::log(3.0);
        assert!((loss - floor).abs() < 1e-4, "{loss} vs {floor}");
    }
}
