//! Likelihood estimation: importance-sampled full and partial
//! log-likelihood, and an exact enumeration oracle for tiny latent spaces.
//!
//! Both estimators draw K hard latent samples from the posterior
//! q_psi(z|x_{1:T}) and reweight — by the uniform prior for the full
//! likelihood, by the partial posterior for the conditional one. All
//! log-domain arithmetic runs in f64 through log-sum-exp.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{gaussian_log_prob, prior_log_prob_value, LatentSequence, PaddedPrompt, Vssm};
use crate::real::Real;
use crate::rng::{RngKey, Role};
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

/// Guard for the enumeration oracle: N^(Z*T) may not exceed this.
pub const ENUMERATION_LIMIT: u64 = 1 << 20;

/// Which likelihood a report estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodMode {
    Full,
    Partial { c: usize },
}

/// One sequence's estimate.
#[derive(Debug, Clone)]
pub struct LikelihoodReport {
    pub estimate_nats: f64,
    pub k: usize,
    /// Max log-weight minus log-mean-weight; large values flag a
    /// degenerate posterior where one sample dominates.
    pub weight_spread: f64,
    pub mode: LikelihoodMode,
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let mx = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    let s: f64 = values.iter().map(|v| libm::exp(v - mx)).sum();
    mx + libm::log(s)
}

/// Per-(t,z) log-probabilities from logits, in f64: [t*Z, N].
fn log_probs_f64<S: Real>(logits: &Tensor<S>, z_comp: usize, n_cat: usize) -> Vec<f64> {
    let rows = logits.numel() / (z_comp * n_cat) * z_comp;
    let data: Vec<f64> = logits.data().iter().map(|v| v.to_f64()).collect();
    kernels::log_softmax_rows(&data, rows, n_cat)
}

/// Inverse-CDF categorical draw from one row of log-probabilities.
fn draw_from_log_probs(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &lp) in row.iter().enumerate() {
        acc += libm::exp(lp);
        if u <= acc {
            return k;
        }
    }
    row.len() - 1
}

/// Sample k-th latent assignment from the posterior log-probs; stream
/// address (EvalLatent, t, z), draw index k.
fn draw_posterior_sample(
    lsm: &[f64],
    t_len: usize,
    z_comp: usize,
    n_cat: usize,
    key: RngKey,
    k: u64,
) -> Vec<u32> {
    let mut indices = Vec::with_capacity(t_len * z_comp);
    for t in 0..t_len {
        for z in 0..z_comp {
            let row = &lsm[(t * z_comp + z) * n_cat..(t * z_comp + z + 1) * n_cat];
            let u = key.stream(Role::EvalLatent, t as u32, z as u32).uniform(k);
            indices.push(draw_from_log_probs(row, u) as u32);
        }
    }
    indices
}

fn assignment_log_prob(lsm: &[f64], indices: &[u32], n_cat: usize) -> f64 {
    indices
        .iter()
        .enumerate()
        .map(|(row, &idx)| lsm[row * n_cat + idx as usize])
        .sum()
}

/// Reconstruction restricted to rows t >= c; rows before the cut cannot
/// affect it.
pub fn recon_tail<S: Real>(x: &Tensor<S>, w: &Tensor<S>, sigma: f64, c: usize) -> f64 {
    let t_len = x.shape()[0];
    let mut total = 0.0;
    for t in c..t_len {
        total += gaussian_log_prob(x.row(t), w.row(t), sigma);
    }
    total
}

/// Importance-sampled log-likelihood: log of the average of
/// p(x|z^k) p(z^k) / q_psi(z^k|x) over K posterior samples. A lower bound
/// on log p(x) in expectation.
pub fn is_log_likelihood<S: Real>(
    model: &Vssm<S>,
    x: &Tensor<S>,
    k: usize,
    key: RngKey,
) -> Result<LikelihoodReport> {
    is_weights(model, x, None, k, key).map(|(logw, _)| finish_report(logw, k, LikelihoodMode::Full))
}

/// Importance-sampled partial log-likelihood log p(x_{C+1:T} | x_{1:C}):
/// posterior samples reweighted by q_omega(z|x_{1:C}) / q_psi(z|x_{1:T}),
/// reconstruction restricted to t > C.
pub fn is_partial_log_likelihood<S: Real>(
    model: &Vssm<S>,
    x: &Tensor<S>,
    c: usize,
    k: usize,
    key: RngKey,
) -> Result<LikelihoodReport> {
    if c >= model.hyper.t_len {
        return Err(Error::usage("partial likelihood requires c < t_len"));
    }
    is_weights(model, x, Some(c), k, key)
        .map(|(logw, _)| finish_report(logw, k, LikelihoodMode::Partial { c }))
}

fn finish_report(logw: Vec<f64>, k: usize, mode: LikelihoodMode) -> LikelihoodReport {
    let log_mean = log_sum_exp(&logw) - libm::log(k as f64);
    let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    LikelihoodReport {
        estimate_nats: log_mean,
        k,
        weight_spread: mx - log_mean,
        mode,
    }
}

/// Shared estimator body; returns the K log-weights (exposed for tests).
pub(crate) fn is_weights<S: Real>(
    model: &Vssm<S>,
    x: &Tensor<S>,
    partial_c: Option<usize>,
    k: usize,
    key: RngKey,
) -> Result<(Vec<f64>, Vec<Vec<u32>>)> {
    if k < 1 {
        return Err(Error::usage("sample count must be at least 1"));
    }
    let h = &model.hyper;
    let v = model.encode_posterior(x, ScanMode::Sequential)?;
    let lsm_post = log_probs_f64(&v, h.z_comp, h.n_cat);

    let lsm_partial = match partial_c {
        Some(c) => {
            let prompt = PaddedPrompt::from_cut(x, c)?;
            let v_bar = model.encode_partial(&prompt, ScanMode::Sequential)?;
            Some(log_probs_f64(&v_bar, h.z_comp, h.n_cat))
        }
        None => None,
    };
    let log_prior = prior_log_prob_value(h);

    let mut logw = Vec::with_capacity(k);
    let mut samples = Vec::with_capacity(k);
    for i in 0..k {
        let indices = draw_posterior_sample(&lsm_post, h.t_len, h.z_comp, h.n_cat, key, i as u64);
        let log_q = assignment_log_prob(&lsm_post, &indices, h.n_cat);
        let z = LatentSequence::from_indices(indices.clone(), h.t_len, h.z_comp, h.n_cat)?;
        let w = model.decode(&z, ScanMode::Sequential)?;
        let lw = match (&lsm_partial, partial_c) {
            (Some(lsm_bar), Some(c)) => {
                let log_q_bar = assignment_log_prob(lsm_bar, &indices, h.n_cat);
                recon_tail(x, &w, h.sigma, c) + log_q_bar - log_q
            }
            _ => recon_tail(x, &w, h.sigma, 0) + log_prior - log_q,
        };
        logw.push(lw);
        samples.push(indices);
    }
    Ok((logw, samples))
}

// ── Enumeration oracle ──────────────────────────────────────────────

fn enumeration_size(hyper: &crate::model::VssmHyper) -> Result<u64> {
    let digits = (hyper.t_len * hyper.z_comp) as u32;
    let mut total: u64 = 1;
    for _ in 0..digits {
        total = total
            .checked_mul(hyper.n_cat as u64)
            .filter(|&v| v <= ENUMERATION_LIMIT)
            .ok_or_else(|| Error::usage("latent space too large to enumerate"))?;
    }
    Ok(total)
}

fn for_each_assignment<S: Real>(
    model: &Vssm<S>,
    mut f: impl FnMut(&[u32], &Tensor<S>) -> Result<()>,
) -> Result<()> {
    let h = &model.hyper;
    let digits = h.t_len * h.z_comp;
    let total = enumeration_size(h)?;
    let mut indices = alloc::vec![0u32; digits];
    for _ in 0..total {
        let z = LatentSequence::from_indices(indices.clone(), h.t_len, h.z_comp, h.n_cat)?;
        let w = model.decode(&z, ScanMode::Sequential)?;
        f(&indices, &w)?;
        // Odometer increment.
        for d in (0..digits).rev() {
            indices[d] += 1;
            if (indices[d] as usize) < h.n_cat {
                break;
            }
            indices[d] = 0;
        }
    }
    Ok(())
}

/// Exact log p(x) by summing p(x|z) p(z) over every latent assignment.
/// Usage error when N^(Z*T) exceeds [`ENUMERATION_LIMIT`].
pub fn exact_log_likelihood<S: Real>(model: &Vssm<S>, x: &Tensor<S>) -> Result<f64> {
    let h = &model.hyper;
    let log_prior = prior_log_prob_value(h);
    let mut terms = Vec::new();
    for_each_assignment(model, |_indices, w| {
        terms.push(recon_tail(x, w, h.sigma, 0) + log_prior);
        Ok(())
    })?;
    Ok(log_sum_exp(&terms))
}

/// Exact log p(x_{C+1:T} | x_{1:C}) under the model pair (decoder,
/// partial posterior): log sum_z q_omega(z|x_{1:C}) p(x_{C+1:T}|z).
pub fn exact_partial_log_likelihood<S: Real>(
    model: &Vssm<S>,
    x: &Tensor<S>,
    c: usize,
) -> Result<f64> {
    let h = &model.hyper;
    if c >= h.t_len {
        return Err(Error::usage("partial likelihood requires c < t_len"));
    }
    let prompt = PaddedPrompt::from_cut(x, c)?;
    let v_bar = model.encode_partial(&prompt, ScanMode::Sequential)?;
    let lsm_bar = log_probs_f64(&v_bar, h.z_comp, h.n_cat);
    let mut terms = Vec::new();
    for_each_assignment(model, |indices, w| {
        let log_q_bar = assignment_log_prob(&lsm_bar, indices, h.n_cat);
        terms.push(recon_tail(x, w, h.sigma, c) + log_q_bar);
        Ok(())
    })?;
    Ok(log_sum_exp(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VssmHyper;

    pub(crate) fn enumerable_hyper() -> VssmHyper {
        VssmHyper {
            t_len: 2,
            obs_dim: 1,
            z_comp: 1,
            n_cat: 2,
            sigma: 0.1,
            tau: 1.0,
            width: 3,
            state: 2,
            hidden: 4,
            layers: 1,
        }
    }

    fn enumerable_model(seed: u64) -> Vssm<f32> {
        Vssm::init(enumerable_hyper(), RngKey::new(seed)).unwrap()
    }

    fn seq(values: &[f32]) -> Tensor<f32> {
        Tensor::new(&[values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn k_must_be_positive() {
        let m = enumerable_model(1);
        let x = seq(&[0.4, 0.6]);
        assert!(is_log_likelihood(&m, &x, 0, RngKey::new(2)).is_err());
    }

    #[test]
    fn large_k_estimate_matches_enumeration() {
        let m = enumerable_model(3);
        let x = seq(&[0.3, 0.8]);
        let exact = exact_log_likelihood(&m, &x).unwrap();
        let report = is_log_likelihood(&m, &x, 5000, RngKey::new(4)).unwrap();
        assert!(
            (report.estimate_nats - exact).abs() < 0.05,
            "{} vs {exact}",
            report.estimate_nats
        );
        assert!(report.weight_spread.is_finite());
    }

    #[test]
    fn partial_large_k_estimate_matches_enumeration() {
        let m = enumerable_model(5);
        let x = seq(&[0.2, 0.9]);
        let exact = exact_partial_log_likelihood(&m, &x, 1).unwrap();
        let report = is_partial_log_likelihood(&m, &x, 1, 5000, RngKey::new(6)).unwrap();
        assert!(
            (report.estimate_nats - exact).abs() < 0.05,
            "{} vs {exact}",
            report.estimate_nats
        );
    }

    #[test]
    fn estimate_is_permutation_invariant() {
        let m = enumerable_model(7);
        let x = seq(&[0.5, 0.1]);
        let (mut logw, _) = is_weights(&m, &x, None, 64, RngKey::new(8)).unwrap();
        let direct = log_sum_exp(&logw) - libm::log(64.0);
        logw.reverse();
        logw.swap(0, 31);
        let permuted = log_sum_exp(&logw) - libm::log(64.0);
        assert_eq!(direct, permuted);
    }

    #[test]
    fn uniform_partial_at_c0_reduces_to_full_estimator() {
        let mut m = enumerable_model(9);
        for v in m.partial.head_w.data_mut() {
            *v = 0.0;
        }
        for v in m.partial.head_b.data_mut() {
            *v = 0.0;
        }
        let x = seq(&[0.7, 0.4]);
        let full = is_log_likelihood(&m, &x, 500, RngKey::new(10)).unwrap();
        let partial = is_partial_log_likelihood(&m, &x, 0, 500, RngKey::new(10)).unwrap();
        assert!(
            (full.estimate_nats - partial.estimate_nats).abs() < 1e-9,
            "{} vs {}",
            full.estimate_nats,
            partial.estimate_nats
        );
    }

    #[test]
    fn recon_tail_ignores_rows_before_cut() {
        let x = seq(&[0.1, 0.2, 0.3, 0.4]);
        let w = seq(&[0.15, 0.25, 0.35, 0.45]);
        let mut w2 = w.clone();
        w2.data_mut()[0] = 99.0;
        w2.data_mut()[1] = -50.0;
        assert_eq!(recon_tail(&x, &w, 0.1, 2), recon_tail(&x, &w2, 0.1, 2));
        assert_ne!(recon_tail(&x, &w, 0.1, 1), recon_tail(&x, &w2, 0.1, 1));
    }

    #[test]
    fn constant_decoder_marginalizes_out_latents() {
        let mut m = enumerable_model(11);
        // Zero every decoder weight except the head bias: w is that bias
        // everywhere and the latent marginalizes out.
        m.decoder.visit_params_mut("dec", &mut |n, t| {
            if !n.ends_with("head.b") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        });
        let bias = m.decoder.head_b.data()[0];
        let x = seq(&[0.3, 0.6]);
        let exact = exact_log_likelihood(&m, &x).unwrap();
        let direct: f64 = x
            .data()
            .iter()
            .map(|&v| gaussian_log_prob(&[v], &[bias], 0.1))
            .sum();
        assert!((exact - direct).abs() < 1e-9, "{exact} vs {direct}");
    }

    #[test]
    fn enumeration_guard_rejects_large_spaces() {
        let mut h = enumerable_hyper();
        h.t_len = 8;
        h.z_comp = 4;
        h.n_cat = 8; // 8^32 >> 2^20
        let m: Vssm<f32> = Vssm::init(h, RngKey::new(12)).unwrap();
        let x = Tensor::zeros(&[8, 1]);
        assert!(matches!(exact_log_likelihood(&m, &x), Err(Error::Usage(_))));
    }

    #[test]
    fn exact_exceeds_single_sample_elbo_mean() {
        use crate::model::ObjectiveCfg;
        // Jensen gap check: the mean one-sample ELBO (hard draws) stays
        // below the exact log-likelihood up to Monte Carlo error.
        for seed in 0..5u64 {
            let m = enumerable_model(100 + seed);
            let s = RngKey::new(200 + seed).stream(Role::Init, 0, 0);
            let x = seq(&[s.uniform(0) as f32, s.uniform(1) as f32]);
            let exact = exact_log_likelihood(&m, &x).unwrap();
            let draws = 400;
            let mut mean = 0.0;
            let mut m2 = 0.0;
            let root = RngKey::new(300 + seed);
            for i in 0..draws {
                let out = m
                    .elbo(&x, root.child(i as u64), ObjectiveCfg::default())
                    .unwrap();
                mean += out.elbo;
                m2 += out.elbo * out.elbo;
            }
            mean /= draws as f64;
            m2 /= draws as f64;
            let se = ((m2 - mean * mean) / draws as f64).max(0.0).sqrt();
            assert!(
                mean <= exact + 3.0 * se,
                "seed {seed}: mean {mean} exact {exact} se {se}"
            );
        }
    }
}
