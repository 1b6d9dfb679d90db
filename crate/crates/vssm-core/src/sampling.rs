//! Generation: one-shot parallel sampling, chunked resumable sampling, and
//! the sequential baseline sampler used for latency comparison.
//!
//! Randomness discipline: every sampled quantity draws from a counter
//! stream addressed by (role, position, component). Because position t
//! never consumes draws that later positions depend on, any partition of
//! the generation range into chunks produces bit-identical output —
//! including the single-chunk case, which is exactly the one-shot sampler.
//! Generation scans run in sequential mode for the same reason: the
//! recurrence is bit-stable under segmentation, a parallel reduction tree
//! is not.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{LatentSequence, PaddedPrompt, Vssm};
use crate::real::Real;
use crate::rng::{RngKey, Role};
use crate::ssm::{LayerStates, ScanMode, StackedSsm};
use crate::tensor::Tensor;
use crate::wire::{self, Reader};

/// Instrumented evaluation counts; the machine-independent evidence for
/// the parallel-generation property.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenCounters {
    /// Whole-segment stacked forward evaluations (any length >= 1).
    pub stacked_forward_evals: usize,
    /// Length-1 stacked evaluations inside sequential sampling loops.
    pub single_step_evals: usize,
}

/// Sampler options.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleCfg {
    /// Emit the Gaussian mean instead of sampling the observation.
    pub mean_only: bool,
}

fn sample_categorical<S: Real>(logits_row: &[S], u: f64) -> usize {
    // Inverse CDF over softmax probabilities, accumulated in f64.
    let row: Vec<f64> = logits_row.iter().map(|v| v.to_f64()).collect();
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
    let mut acc = 0.0;
    for (k, v) in row.iter().enumerate() {
        acc += libm::exp(v - mx) / z;
        if u <= acc {
            return k;
        }
    }
    row.len() - 1
}

/// Draws z_{t,z} for global positions [t0, t0+rows) from the logit rows,
/// using the per-position latent streams.
fn sample_latents<S: Real>(
    logits: &Tensor<S>,
    t0: usize,
    key: RngKey,
    z_comp: usize,
    n_cat: usize,
) -> Vec<u32> {
    let rows = logits.shape()[0];
    let mut indices = Vec::with_capacity(rows * z_comp);
    for r in 0..rows {
        let row = logits.row(r);
        for z in 0..z_comp {
            let u = key
                .stream(Role::Latent, (t0 + r) as u32, z as u32)
                .uniform(0);
            let k = sample_categorical(&row[z * n_cat..(z + 1) * n_cat], u);
            indices.push(k as u32);
        }
    }
    indices
}

/// Draws observation rows for global positions [t0, t0+rows) around the
/// decoded means.
fn sample_outputs<S: Real>(
    means: &Tensor<S>,
    t0: usize,
    key: RngKey,
    sigma: f64,
    cfg: SampleCfg,
) -> Vec<S> {
    let rows = means.shape()[0];
    let d = means.shape()[1];
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let row = means.row(r);
        for j in 0..d {
            let v = if cfg.mean_only || sigma == 0.0 {
                row[j].to_f64()
            } else {
                let n = key
                    .stream(Role::Output, (t0 + r) as u32, j as u32)
                    .normal(0);
                row[j].to_f64() + sigma * n
            };
            out.push(S::from_f64(v));
        }
    }
    out
}

/// One-shot sampling: encode the padded prompt with the partial stack,
/// draw every latent, decode, and draw outputs past the prompt. Exactly
/// two stacked forward evaluations, independent of the sequence length.
pub fn sample_full<S: Real>(
    model: &Vssm<S>,
    prompt: &PaddedPrompt<S>,
    key: RngKey,
    cfg: SampleCfg,
    counters: &mut GenCounters,
) -> Result<Tensor<S>> {
    let h = &model.hyper;
    if prompt.c > prompt.t_len {
        return Err(Error::usage("prompt longer than sequence"));
    }
    let v_bar = model.encode_partial(prompt, ScanMode::Sequential)?;
    counters.stacked_forward_evals += 1;

    let indices = sample_latents(&v_bar, 0, key, h.z_comp, h.n_cat);
    let z = LatentSequence::from_indices(indices, h.t_len, h.z_comp, h.n_cat)?;
    let w = model.decode(&z, ScanMode::Sequential)?;
    counters.stacked_forward_evals += 1;

    let mut data = Vec::with_capacity(h.t_len * h.obs_dim);
    data.extend_from_slice(prompt.observed.data());
    if prompt.c < h.t_len {
        let tail = Tensor::new(
            &[h.t_len - prompt.c, h.obs_dim],
            w.data()[prompt.c * h.obs_dim..].to_vec(),
        )?;
        data.extend(sample_outputs(&tail, prompt.c, key, h.sigma, cfg));
    }
    Tensor::new(&[h.t_len, h.obs_dim], data)
}

// ── Resumable sessions ──────────────────────────────────────────────

const SESSION_MAGIC: &[u8; 4] = b"VSSB";
const SESSION_VERSION: u32 = 1;

/// Paused generation state: position, carried per-layer states for both
/// stacks, the committed prefix, and the stream key.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSession {
    c: usize,
    t_len: usize,
    obs_dim: usize,
    par_states: LayerStates<f32>,
    dec_states: LayerStates<f32>,
    committed: Vec<f32>,
    key: RngKey,
    /// Reserved stream offset; stays 0 under the per-position discipline.
    counter: u64,
    cfg: SampleCfg,
    counters: GenCounters,
}

impl GenerationSession {
    pub fn position(&self) -> usize {
        self.c
    }

    pub fn target_len(&self) -> usize {
        self.t_len
    }

    pub fn counters(&self) -> GenCounters {
        self.counters
    }

    /// Committed output rows x_{1:C} (prompt plus generated so far).
    pub fn committed(&self) -> Tensor<f32> {
        Tensor::new(&[self.c, self.obs_dim], self.committed.clone()).unwrap()
    }

    pub fn par_states(&self) -> &LayerStates<f32> {
        &self.par_states
    }

    pub fn dec_states(&self) -> &LayerStates<f32> {
        &self.dec_states
    }

    pub fn is_done(&self) -> bool {
        self.c == self.t_len
    }
}

/// Opens a session by processing the prompt through both stacks: partial
/// logits and carried states over x_{1:C}, latents for the prompt region
/// sampled and pushed through the decoder for its states.
pub fn open_session(
    model: &Vssm<f32>,
    prompt: &PaddedPrompt<f32>,
    key: RngKey,
    cfg: SampleCfg,
) -> Result<GenerationSession> {
    let h = &model.hyper;
    if prompt.t_len != h.t_len || prompt.obs_dim != h.obs_dim {
        return Err(Error::usage("prompt does not match model"));
    }
    let mut counters = GenCounters::default();
    let c = prompt.c;

    let (par_states, dec_states) = if c == 0 {
        (
            LayerStates::zeros(&h.partial_config()),
            LayerStates::zeros(&h.decoder_config()),
        )
    } else {
        // Observed rows with mask 1, exactly as the one-shot encoder sees them.
        let full = prompt.encoded();
        let seg = Tensor::new(
            &[c, h.obs_dim + 1],
            full.data()[..c * (h.obs_dim + 1)].to_vec(),
        )?;
        let (v_bar, par_states) = model.partial.forward(&seg, None, ScanMode::Sequential)?;
        counters.stacked_forward_evals += 1;

        let indices = sample_latents(&v_bar, 0, key, h.z_comp, h.n_cat);
        let zn = h.latent_dim();
        let mut onehot = vec![0.0f32; c * zn];
        for t in 0..c {
            for z in 0..h.z_comp {
                let idx = indices[t * h.z_comp + z] as usize;
                onehot[t * zn + z * h.n_cat + idx] = 1.0;
            }
        }
        let onehot = Tensor::new(&[c, zn], onehot)?;
        let (_w, dec_states) = model.decoder.forward(&onehot, None, ScanMode::Sequential)?;
        counters.stacked_forward_evals += 1;
        (par_states, dec_states)
    };

    Ok(GenerationSession {
        c,
        t_len: h.t_len,
        obs_dim: h.obs_dim,
        par_states,
        dec_states,
        committed: prompt.observed.data().to_vec(),
        key,
        counter: 0,
        cfg,
        counters,
    })
}

/// Advances the session by `width` positions: the partial stack consumes
/// `width` empty tokens from its carried states, latents are sampled and
/// decoded from the decoder's carried states, and outputs are drawn.
/// Returns the newly generated rows x_{C+1:C+width}.
pub fn step_chunk(
    model: &Vssm<f32>,
    session: &mut GenerationSession,
    width: usize,
) -> Result<Tensor<f32>> {
    let h = &model.hyper;
    if width < 1 {
        return Err(Error::usage("chunk width must be at least 1"));
    }
    if session.c + width > session.t_len {
        return Err(Error::usage("chunk overruns the target length"));
    }

    let empty = PaddedPrompt::<f32>::empty_rows(width, h.obs_dim);
    let (v_bar, par_states) =
        model
            .partial
            .forward(&empty, Some(&session.par_states), ScanMode::Sequential)?;
    session.counters.stacked_forward_evals += 1;

    let indices = sample_latents(&v_bar, session.c, session.key, h.z_comp, h.n_cat);
    let zn = h.latent_dim();
    let mut onehot = vec![0.0f32; width * zn];
    for t in 0..width {
        for z in 0..h.z_comp {
            let idx = indices[t * h.z_comp + z] as usize;
            onehot[t * zn + z * h.n_cat + idx] = 1.0;
        }
    }
    let onehot = Tensor::new(&[width, zn], onehot)?;
    let (w, dec_states) =
        model
            .decoder
            .forward(&onehot, Some(&session.dec_states), ScanMode::Sequential)?;
    session.counters.stacked_forward_evals += 1;

    let rows = sample_outputs(&w, session.c, session.key, h.sigma, session.cfg);
    session.committed.extend_from_slice(&rows);
    session.par_states = par_states;
    session.dec_states = dec_states;
    session.c += width;
    Tensor::new(&[width, h.obs_dim], rows)
}

// ── Session serialization ───────────────────────────────────────────

impl GenerationSession {
    /// Versioned binary record: magic "VSSB", version, C, T, D, the RNG
    /// key and reserved counter, both stacks' per-layer state arrays as
    /// little-endian f32, then the committed rows.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SESSION_MAGIC);
        wire::put_u32(&mut out, SESSION_VERSION);
        wire::put_u32(&mut out, self.c as u32);
        wire::put_u32(&mut out, self.t_len as u32);
        wire::put_u32(&mut out, self.obs_dim as u32);
        wire::put_u64(&mut out, self.key.0);
        wire::put_u64(&mut out, self.counter);
        wire::put_u32(&mut out, if self.cfg.mean_only { 1 } else { 0 });
        for states in [&self.par_states, &self.dec_states] {
            wire::put_u32(&mut out, states.states.len() as u32);
            for s in &states.states {
                wire::put_u32(&mut out, s.len() as u32);
                wire::put_f32_slice(&mut out, s);
            }
        }
        wire::put_f32_slice(&mut out, &self.committed);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<GenerationSession> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != SESSION_MAGIC {
            return Err(Error::format("bad session magic"));
        }
        if r.u32()? != SESSION_VERSION {
            return Err(Error::format("unsupported session version"));
        }
        let c = r.u32()? as usize;
        let t_len = r.u32()? as usize;
        let obs_dim = r.u32()? as usize;
        let key = RngKey(r.u64()?);
        let counter = r.u64()?;
        let mean_only = r.u32()? != 0;
        if c > t_len {
            return Err(Error::format("session position past target length"));
        }
        let read_states = |r: &mut Reader, t: usize| -> Result<LayerStates<f32>> {
            let layers = r.u32()? as usize;
            if layers > 4096 {
                return Err(Error::format("implausible layer count"));
            }
            let mut states = Vec::with_capacity(layers);
            for _ in 0..layers {
                let len = r.u32()? as usize;
                states.push(r.f32_vec(len)?);
            }
            Ok(LayerStates { states, t })
        };
        let par_states = read_states(&mut r, c)?;
        let dec_states = read_states(&mut r, c)?;
        let committed = r.f32_vec(c * obs_dim)?;
        if r.remaining() != 0 {
            return Err(Error::format("trailing bytes in session record"));
        }
        Ok(GenerationSession {
            c,
            t_len,
            obs_dim,
            par_states,
            dec_states,
            committed,
            key,
            counter,
            cfg: SampleCfg { mean_only },
            counters: GenCounters::default(),
        })
    }
}

// ── Sequential baseline ─────────────────────────────────────────────

/// Autoregressive stacked-SSM baseline: the stack maps the previous
/// observation (a zero frame at t = 1) to the Gaussian mean of the next.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmBaseline<S: Real = f32> {
    pub t_len: usize,
    pub sigma: f64,
    pub stack: StackedSsm<S>,
}

impl<S: Real> SsmBaseline<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        t_len: usize,
        obs_dim: usize,
        sigma: f64,
        width: usize,
        state: usize,
        hidden: usize,
        layers: usize,
        key: RngKey,
    ) -> Self {
        let stack = StackedSsm::init(
            crate::ssm::StackConfig {
                input_dim: obs_dim,
                output_dim: obs_dim,
                width,
                state,
                hidden,
                layers,
            },
            key,
        );
        SsmBaseline { t_len, sigma, stack }
    }

    pub fn obs_dim(&self) -> usize {
        self.stack.config.input_dim
    }

    /// Teacher-forced inputs for a sequence: a zero start frame followed
    /// by x_{1:T-1}; output row t then predicts x_{t+1}.
    pub fn shifted_input(&self, x: &Tensor<S>) -> Tensor<S> {
        let d = self.obs_dim();
        let t_len = x.shape()[0];
        let mut data = vec![S::ZERO; t_len * d];
        data[d..].copy_from_slice(&x.data()[..(t_len - 1) * d]);
        Tensor::new(&[t_len, d], data).unwrap()
    }

    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor<S>)) {
        self.stack.visit_params("base", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        self.stack.visit_params_mut("base", f);
    }

    pub fn cast<T: Real>(&self) -> SsmBaseline<T> {
        SsmBaseline {
            t_len: self.t_len,
            sigma: self.sigma,
            stack: self.stack.cast(),
        }
    }
}

/// Sequential sampling for the baseline: the prompt's teacher-forced rows
/// go through in one pass, then every remaining position costs one
/// single-step stacked evaluation that consumes the previous observation.
pub fn sample_ssm_baseline<S: Real>(
    baseline: &SsmBaseline<S>,
    prompt: &Tensor<S>,
    key: RngKey,
    cfg: SampleCfg,
    counters: &mut GenCounters,
) -> Result<Tensor<S>> {
    let d = baseline.obs_dim();
    let t_len = baseline.t_len;
    let shape = prompt.shape();
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::usage("prompt must be [c, obs_dim]"));
    }
    let c = shape[0];
    if c >= t_len {
        return Err(Error::usage("prompt must leave room to generate"));
    }

    let mut out: Vec<S> = Vec::with_capacity(t_len * d);
    out.extend_from_slice(prompt.data());

    // Prompt pass: previous-frame inputs for positions 0..c-1.
    let mut states = if c > 0 {
        let mut seg = vec![S::ZERO; c * d];
        seg[d..].copy_from_slice(&prompt.data()[..(c - 1) * d]);
        let seg = Tensor::new(&[c, d], seg)?;
        let (_y, st) = baseline.stack.forward(&seg, None, ScanMode::Parallel)?;
        counters.stacked_forward_evals += 1;
        st
    } else {
        LayerStates::zeros(&baseline.stack.config)
    };

    for t in c..t_len {
        // Consume the previous observation (zero frame at t = 0).
        let prev = if t == 0 {
            Tensor::zeros(&[1, d])
        } else {
            Tensor::new(&[1, d], out[(t - 1) * d..t * d].to_vec())?
        };
        let (y, st) = baseline
            .stack
            .forward(&prev, Some(&states), ScanMode::Sequential)?;
        counters.single_step_evals += 1;
        states = st;
        let mean = Tensor::new(&[1, d], y.data().to_vec())?;
        out.extend(sample_outputs(&mean, t, key, baseline.sigma, cfg));
    }
    Tensor::new(&[t_len, d], out)
}
