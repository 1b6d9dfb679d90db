//! Optimization: Adam, the joint VSSM training step (ELBO plus the
//! partial-posterior term), and the baseline's teacher-forced objective.
//!
//! Gradient routing in the joint loss: the decoder and posterior learn
//! from the (negated) ELBO; the partial stack learns only from the
//! cross-entropy of posterior samples under its own logits. The sample
//! enters that term detached, so the partial term cannot reshape the
//! posterior, and the ELBO never touches the partial stack.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{gumbel_noise_tensor, ObjectiveCfg, Vssm};
use crate::real::LN_SQRT_2PI;
use crate::rng::{RngKey, Role};
use crate::sampling::SsmBaseline;
use crate::tape::{GradientMap, Tape};
use crate::tensor::Tensor;

// ── Adam ────────────────────────────────────────────────────────────

/// Adam with standard moment defaults. Moment buffers are keyed by
/// parameter name and created lazily.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Moment buffers and step count, for trainer-state persistence.
    pub fn export_state(&self) -> (u64, Vec<(String, Vec<f64>, Vec<f64>)>) {
        let entries = self
            .m
            .iter()
            .map(|(name, m)| (name.clone(), m.clone(), self.v[name].clone()))
            .collect();
        (self.t, entries)
    }

    /// Rebuilds an optimizer from exported state.
    pub fn import_state(lr: f64, t: u64, entries: Vec<(String, Vec<f64>, Vec<f64>)>) -> Adam {
        let mut adam = Adam::new(lr);
        adam.t = t;
        for (name, m, v) in entries {
            adam.m.insert(name.clone(), m);
            adam.v.insert(name, v);
        }
        adam
    }

    /// One update over every (name, parameter) pair the visitor yields.
    /// Parameters without a gradient entry are left untouched.
    pub fn step(
        &mut self,
        grads: &GradientMap<f32>,
        visit: impl FnOnce(&mut dyn FnMut(String, &mut Tensor<f32>)),
    ) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let m_all = &mut self.m;
        let v_all = &mut self.v;
        visit(&mut |name: String, param: &mut Tensor<f32>| {
            let g = match grads.get(&name) {
                Some(g) => g,
                None => return,
            };
            let n = param.numel();
            let m = m_all.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = v_all.entry(name).or_insert_with(|| vec![0.0; n]);
            let data = param.data_mut();
            for i in 0..n {
                let gi = g.data()[i] as f64;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= (lr * m_hat / (libm::sqrt(v_hat) + eps)) as f32;
            }
        });
    }
}

// ── Joint VSSM step ─────────────────────────────────────────────────

/// Weights and sampling options for the joint objective.
#[derive(Debug, Clone, Copy)]
pub struct TrainStepCfg {
    /// Weight of the partial-posterior term.
    pub lambda: f64,
    pub objective: ObjectiveCfg,
}

impl Default for TrainStepCfg {
    fn default() -> Self {
        TrainStepCfg {
            lambda: 1.0,
            objective: ObjectiveCfg::default(),
        }
    }
}

/// Per-item objective values.
#[derive(Debug, Clone, Copy, Default)]
pub struct ItemMetrics {
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub partial: f64,
    pub cut: usize,
}

/// Batch-mean objective values for one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepMetrics {
    pub loss: f64,
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub partial: f64,
}

/// Loss and gradients for one sequence: -ELBO + lambda * partial term,
/// with the cut drawn from the item's own stream. Pure in (model, x,
/// item_key), so batches can fan out across threads and merge by
/// summation in item order.
pub fn grad_one_item(
    model: &Vssm<f32>,
    x: &Tensor<f32>,
    cfg: TrainStepCfg,
    item_key: RngKey,
) -> Result<(GradientMap<f32>, ItemMetrics)> {
    let h = &model.hyper;
    let mut tape: Tape<f32> = Tape::new();

    let noise = gumbel_noise_tensor(item_key, Role::GumbelPosterior, h.t_len, h.z_comp, h.n_cat);
    let elbo = model.elbo_tape(&mut tape, x, &noise, cfg.objective)?;
    let mut loss = tape.scale(elbo.elbo, -1.0);

    let mut metrics = ItemMetrics {
        elbo: tape.value(elbo.elbo).data()[0] as f64,
        reconstruction: tape.value(elbo.reconstruction).data()[0] as f64,
        kl: tape.value(elbo.kl).data()[0] as f64,
        partial: 0.0,
        cut: 0,
    };

    if cfg.lambda > 0.0 {
        let cut = item_key.stream(Role::Cut, 0, 0).below(0, (h.t_len + 1) as u64) as usize;
        let target_noise =
            gumbel_noise_tensor(item_key, Role::GumbelTarget, h.t_len, h.z_comp, h.n_cat);
        let partial = model.partial_loss_tape(
            &mut tape,
            x,
            elbo.posterior_logits,
            cut,
            &target_noise,
            cfg.objective,
        )?;
        let weighted = tape.scale(partial, cfg.lambda as f32);
        loss = tape.add(loss, weighted);
        metrics.partial = tape.value(partial).data()[0] as f64;
        metrics.cut = cut;
    }

    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::numeric("non-finite training loss"));
    }
    let grads = tape.backward_all(loss)?;
    Ok((grads, metrics))
}

/// Merges per-item results in order (mean over the batch) and applies one
/// Adam update. Shared by the serial step here and threaded drivers that
/// fan [`grad_one_item`] out and collect in item order.
pub fn apply_batch(
    model: &mut Vssm<f32>,
    adam: &mut Adam,
    results: &[(GradientMap<f32>, ItemMetrics)],
    lambda: f64,
) -> Result<StepMetrics> {
    if results.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let mut merged = GradientMap::default();
    let mut metrics = StepMetrics::default();
    for (grads, item) in results {
        merged.accumulate(grads);
        metrics.elbo += item.elbo;
        metrics.reconstruction += item.reconstruction;
        metrics.kl += item.kl;
        metrics.partial += item.partial;
    }
    let inv = 1.0 / results.len() as f64;
    metrics.elbo *= inv;
    metrics.reconstruction *= inv;
    metrics.kl *= inv;
    metrics.partial *= inv;
    metrics.loss = -metrics.elbo + lambda * metrics.partial;
    merged.scale(inv as f32);
    if !merged.all_finite() {
        return Err(Error::numeric("non-finite gradients in training step"));
    }
    adam.step(&merged, |f| model.visit_params_mut(&mut |n, t| f(n, t)));
    Ok(metrics)
}

/// One optimizer step over a batch: per-item gradients are averaged in
/// item order and applied with Adam. Item i draws from step_key.child(i).
pub fn train_step(
    model: &mut Vssm<f32>,
    adam: &mut Adam,
    batch: &[Tensor<f32>],
    cfg: TrainStepCfg,
    step_key: RngKey,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let mut results = Vec::with_capacity(batch.len());
    for (i, x) in batch.iter().enumerate() {
        results.push(grad_one_item(model, x, cfg, step_key.child(i as u64))?);
    }
    apply_batch(model, adam, &results, cfg.lambda)
}

// ── Baseline objective ──────────────────────────────────────────────

/// Teacher-forced Gaussian negative log-likelihood of next-step
/// prediction, summed over the sequence, recorded on a tape.
pub fn baseline_nll_tape(
    tape: &mut Tape<f32>,
    baseline: &SsmBaseline<f32>,
    x: &Tensor<f32>,
    mode: crate::ssm::ScanMode,
) -> Var {
    let t_len = x.shape()[0];
    let d = x.shape()[1];
    let shifted = tape.constant(baseline.shifted_input(x));
    let w = baseline.stack.forward_tape(tape, "base", shifted, mode);
    let target = tape.constant(x.clone());
    let diff = tape.sub(w, target);
    let sq = tape.mul_elem(diff, diff);
    let ssq = tape.sum_all(sq);
    let inv = 1.0 / (2.0 * baseline.sigma * baseline.sigma);
    let scaled = tape.scale(ssq, inv as f32);
    let norm = (t_len * d) as f64 * (libm::log(baseline.sigma) + LN_SQRT_2PI);
    tape.add_const(scaled, norm as f32)
}

use crate::tape::Var;

/// Teacher-forced NLL value, evaluated in one parallel-capable pass.
pub fn baseline_nll(
    baseline: &SsmBaseline<f32>,
    x: &Tensor<f32>,
    mode: crate::ssm::ScanMode,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = baseline_nll_tape(&mut tape, baseline, x, mode);
    Ok(tape.value(loss).data()[0] as f64)
}

/// One Adam step for the baseline over a batch.
pub fn train_step_baseline(
    baseline: &mut SsmBaseline<f32>,
    adam: &mut Adam,
    batch: &[Tensor<f32>],
    mode: crate::ssm::ScanMode,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let mut merged = GradientMap::default();
    let mut total = 0.0;
    for x in batch {
        let mut tape = Tape::new();
        let loss = baseline_nll_tape(&mut tape, baseline, x, mode);
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::numeric("non-finite baseline loss"));
        }
        total += value as f64;
        merged.accumulate(&tape.backward_all(loss)?);
    }
    let inv = 1.0 / batch.len() as f64;
    merged.scale(inv as f32);
    adam.step(&merged, |f| baseline.visit_params_mut(&mut |n, t| f(n, t)));
    Ok(total * inv)
}
