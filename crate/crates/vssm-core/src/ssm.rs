//! Diagonal state-space layers and the stacked SSM/FNN sequence model.
//!
//! Each layer owns a per-channel diagonal recurrence: channel c of the
//! (layer-normed) input drives its own `state`-wide hidden vector through
//! h_t = a ⊙ h_{t-1} + b_c · u_{t,c}, with the decay a stored unconstrained
//! and squashed through tanh into (-1, 1) so the recurrence cannot explode.
//! A two-layer feedforward reads the flattened states back to the channel
//! width and a residual connection closes the block. Stacking L blocks
//! between an input embedding and an output head gives a causal
//! sequence-to-sequence map that can be evaluated step by step, segment by
//! segment (with carried states), or across all timesteps at once.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::real::Real;
use crate::rng::{RngKey, Role};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// How a scan over time is evaluated. Both modes compute the same
/// recurrence; the parallel mode uses a logarithmic-depth Blelloch tree
/// with a fixed shape per length, the sequential mode is the literal
/// left-to-right recurrence (and is bit-stable under segmentation, which
/// chunked generation relies on).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Parallel,
}

/// Sizes of one stacked model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub width: usize,
    pub state: usize,
    pub hidden: usize,
    pub layers: usize,
}

/// One SSM block: recurrence parameters (a, b) and feedforward parameters,
/// plus the pre-norm affine.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmLayer<S: Real = f32> {
    pub norm_gamma: Tensor<S>,
    pub norm_beta: Tensor<S>,
    /// Unconstrained decay, [width * state]; squashed via tanh at use.
    pub a_raw: Tensor<S>,
    /// Per-channel input projection, [width, state].
    pub b_proj: Tensor<S>,
    pub fnn_w1: Tensor<S>,
    pub fnn_b1: Tensor<S>,
    pub fnn_w2: Tensor<S>,
    pub fnn_b2: Tensor<S>,
}

impl<S: Real> SsmLayer<S> {
    /// Squashed decay vector, every element in (-1, 1).
    pub fn decay(&self) -> Vec<S> {
        self.a_raw.data().iter().map(|&v| v.tanh()).collect()
    }

    /// Runs just this layer's recurrence over an input segment:
    /// drive then scan. `input`: [t, width], `h0`: [width * state].
    pub fn scan(&self, input: &Tensor<S>, h0: &[S], mode: ScanMode) -> Result<Tensor<S>> {
        let shape = input.shape();
        if shape.len() != 2 || shape[1] != self.width() {
            return Err(Error::usage("layer scan: input shape mismatch"));
        }
        if h0.len() != self.state_len() {
            return Err(Error::usage("layer scan: state size mismatch"));
        }
        let t_len = shape[0];
        let drive = kernels::channel_drive(
            input.data(),
            self.b_proj.data(),
            t_len,
            self.width(),
            self.state(),
        );
        let a = self.decay();
        let h = match mode {
            ScanMode::Sequential => kernels::scan_sequential(&a, &drive, h0, t_len),
            ScanMode::Parallel => kernels::scan_parallel(&a, &drive, h0, t_len),
        };
        Tensor::new(&[t_len, self.state_len()], h)
    }

    pub fn width(&self) -> usize {
        self.b_proj.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.b_proj.shape()[1]
    }

    pub fn state_len(&self) -> usize {
        self.width() * self.state()
    }
}

/// Carried per-layer hidden vectors after processing some prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates<S: Real = f32> {
    pub states: Vec<Vec<S>>,
    /// Number of timesteps already consumed.
    pub t: usize,
}

impl<S: Real> LayerStates<S> {
    pub fn zeros(config: &StackConfig) -> Self {
        LayerStates {
            states: vec![vec![S::ZERO; config.width * config.state]; config.layers],
            t: 0,
        }
    }
}

/// L alternating SSM blocks and feedforward maps between an input
/// embedding and an output head.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSsm<S: Real = f32> {
    pub config: StackConfig,
    pub embed_w: Tensor<S>,
    pub embed_b: Tensor<S>,
    pub layers: Vec<SsmLayer<S>>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
}

impl<S: Real> StackedSsm<S> {
    /// Seeded initialization. Weights are scaled-normal in fan-in, decays
    /// start spread over (0.3, 0.95) so memory horizons differ per unit.
    pub fn init(config: StackConfig, key: RngKey) -> Self {
        let mut comp = 0u32;
        let mut normal = |shape: &[usize], scale: f64| -> Tensor<S> {
            let s = key.stream(Role::Init, 0, comp);
            comp += 1;
            let n: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..n)
                    .map(|i| S::from_f64(s.normal(i as u64) * scale))
                    .collect(),
            )
            .unwrap()
        };

        let embed_w = normal(
            &[config.input_dim, config.width],
            1.0 / (config.input_dim as f64).sqrt(),
        );
        let embed_b = Tensor::zeros(&[config.width]);

        let mut layers = Vec::with_capacity(config.layers);
        for li in 0..config.layers {
            let b_proj = normal(&[config.width, config.state], 1.0 / (config.state as f64).sqrt());
            let fnn_w1 = normal(
                &[config.width * config.state, config.hidden],
                1.0 / ((config.width * config.state) as f64).sqrt(),
            );
            let fnn_w2 = normal(
                &[config.hidden, config.width],
                1.0 / (config.hidden as f64).sqrt(),
            );
            // Decay draws live on their own address plane (t = 1).
            let decay_stream = key.stream(Role::Init, 1, li as u32);
            let a_raw = Tensor::new(
                &[config.width * config.state],
                (0..config.width * config.state)
                    .map(|i| {
                        let u = 0.3 + 0.65 * decay_stream.uniform(i as u64);
                        S::from_f64(libm::atanh(u))
                    })
                    .collect(),
            )
            .unwrap();
            layers.push(SsmLayer {
                norm_gamma: Tensor::filled(&[config.width], S::ONE),
                norm_beta: Tensor::zeros(&[config.width]),
                a_raw,
                b_proj,
                fnn_w1,
                fnn_b1: Tensor::zeros(&[config.hidden]),
                fnn_w2,
                fnn_b2: Tensor::zeros(&[config.width]),
            });
        }

        let head_w = normal(
            &[config.width, config.output_dim],
            1.0 / (config.width as f64).sqrt(),
        );
        let head_b = Tensor::zeros(&[config.output_dim]);

        StackedSsm {
            config,
            embed_w,
            embed_b,
            layers,
            head_w,
            head_b,
        }
    }

    fn check_input(&self, input: &Tensor<S>) -> Result<usize> {
        let shape = input.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::usage(format!(
                "stack input must be [t, {}], got {:?}",
                self.config.input_dim, shape
            )));
        }
        Ok(shape[0])
    }

    fn check_states(&self, states: &LayerStates<S>) -> Result<()> {
        if states.states.len() != self.config.layers {
            return Err(Error::usage("carried states: wrong layer count"));
        }
        for s in &states.states {
            if s.len() != self.config.width * self.config.state {
                return Err(Error::usage("carried states: wrong state size"));
            }
        }
        Ok(())
    }

    /// Evaluates the stack over an input segment. With `initial` states the
    /// segment continues a longer sequence; output row t depends only on
    /// input rows 0..=t (and the carried prefix). Returns the outputs and
    /// the states after the segment.
    pub fn forward(
        &self,
        input: &Tensor<S>,
        initial: Option<&LayerStates<S>>,
        mode: ScanMode,
    ) -> Result<(Tensor<S>, LayerStates<S>)> {
        let t_len = self.check_input(input)?;
        if let Some(st) = initial {
            self.check_states(st)?;
        }
        let cfg = &self.config;
        let state_len = cfg.width * cfg.state;
        let mut final_states = Vec::with_capacity(cfg.layers);

        // Embed.
        let mut u = kernels::matmul(
            input.data(),
            self.embed_w.data(),
            t_len,
            cfg.input_dim,
            cfg.width,
        );
        kernels::add_row_bias(&mut u, self.embed_b.data(), t_len);

        let zero_state = vec![S::ZERO; state_len];
        for (i, layer) in self.layers.iter().enumerate() {
            let h0: &[S] = match initial {
                Some(st) => &st.states[i],
                None => &zero_state,
            };
            let n = kernels::layer_norm_rows(
                &u,
                layer.norm_gamma.data(),
                layer.norm_beta.data(),
                t_len,
                S::from_f64(NORM_EPS),
            );
            let drive = kernels::channel_drive(&n, layer.b_proj.data(), t_len, cfg.width, cfg.state);
            let a = layer.decay();
            let h = match mode {
                ScanMode::Sequential => kernels::scan_sequential(&a, &drive, h0, t_len),
                ScanMode::Parallel => kernels::scan_parallel(&a, &drive, h0, t_len),
            };
            final_states.push(h[(t_len - 1) * state_len..].to_vec());

            let mut f1 = kernels::matmul(&h, layer.fnn_w1.data(), t_len, state_len, cfg.hidden);
            kernels::add_row_bias(&mut f1, layer.fnn_b1.data(), t_len);
            let f1 = kernels::silu(&f1);
            let mut f2 = kernels::matmul(&f1, layer.fnn_w2.data(), t_len, cfg.hidden, cfg.width);
            kernels::add_row_bias(&mut f2, layer.fnn_b2.data(), t_len);
            for (uv, fv) in u.iter_mut().zip(&f2) {
                *uv += *fv;
            }
        }

        let mut y = kernels::matmul(&u, self.head_w.data(), t_len, cfg.width, cfg.output_dim);
        kernels::add_row_bias(&mut y, self.head_b.data(), t_len);

        let t_base = initial.map(|s| s.t).unwrap_or(0);
        Ok((
            Tensor::new(&[t_len, cfg.output_dim], y)?,
            LayerStates {
                states: final_states,
                t: t_base + t_len,
            },
        ))
    }

    /// Tape-recorded forward from zero states, for training. Registers all
    /// parameters under `prefix` and returns the output var.
    pub fn forward_tape(&self, tape: &mut Tape<S>, prefix: &str, input: Var, mode: ScanMode) -> Var {
        let cfg = &self.config;
        let state_len = cfg.width * cfg.state;

        let embed_w = tape.param(&format!("{prefix}.embed.w"), &self.embed_w);
        let embed_b = tape.param(&format!("{prefix}.embed.b"), &self.embed_b);
        let mut u = tape.matmul(input, embed_w);
        u = tape.add_row_bias(u, embed_b);

        for (i, layer) in self.layers.iter().enumerate() {
            let gamma = tape.param(&format!("{prefix}.blocks.{i}.norm.gamma"), &layer.norm_gamma);
            let beta = tape.param(&format!("{prefix}.blocks.{i}.norm.beta"), &layer.norm_beta);
            let a_raw = tape.param(&format!("{prefix}.blocks.{i}.a"), &layer.a_raw);
            let b_proj = tape.param(&format!("{prefix}.blocks.{i}.b"), &layer.b_proj);
            let w1 = tape.param(&format!("{prefix}.blocks.{i}.fnn.w1"), &layer.fnn_w1);
            let b1 = tape.param(&format!("{prefix}.blocks.{i}.fnn.b1"), &layer.fnn_b1);
            let w2 = tape.param(&format!("{prefix}.blocks.{i}.fnn.w2"), &layer.fnn_w2);
            let b2 = tape.param(&format!("{prefix}.blocks.{i}.fnn.b2"), &layer.fnn_b2);

            let n = tape.layer_norm(u, gamma, beta, S::from_f64(NORM_EPS));
            let drive = tape.channel_drive(n, b_proj);
            let a = tape.tanh(a_raw);
            let h0 = tape.constant(Tensor::zeros(&[state_len]));
            let h = tape.scan(drive, a, h0, mode);
            let f1 = tape.matmul(h, w1);
            let f1 = tape.add_row_bias(f1, b1);
            let f1 = tape.silu(f1);
            let f2 = tape.matmul(f1, w2);
            let f2 = tape.add_row_bias(f2, b2);
            u = tape.add(u, f2);
        }

        let head_w = tape.param(&format!("{prefix}.head.w"), &self.head_w);
        let head_b = tape.param(&format!("{prefix}.head.b"), &self.head_b);
        let y = tape.matmul(u, head_w);
        tape.add_row_bias(y, head_b)
    }

    /// Visits every parameter tensor as (name, tensor).
    pub fn visit_params(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<S>)) {
        f(format!("{prefix}.embed.w"), &self.embed_w);
        f(format!("{prefix}.embed.b"), &self.embed_b);
        for (i, layer) in self.layers.iter().enumerate() {
            f(format!("{prefix}.blocks.{i}.norm.gamma"), &layer.norm_gamma);
            f(format!("{prefix}.blocks.{i}.norm.beta"), &layer.norm_beta);
            f(format!("{prefix}.blocks.{i}.a"), &layer.a_raw);
            f(format!("{prefix}.blocks.{i}.b"), &layer.b_proj);
            f(format!("{prefix}.blocks.{i}.fnn.w1"), &layer.fnn_w1);
            f(format!("{prefix}.blocks.{i}.fnn.b1"), &layer.fnn_b1);
            f(format!("{prefix}.blocks.{i}.fnn.w2"), &layer.fnn_w2);
            f(format!("{prefix}.blocks.{i}.fnn.b2"), &layer.fnn_b2);
        }
        f(format!("{prefix}.head.w"), &self.head_w);
        f(format!("{prefix}.head.b"), &self.head_b);
    }

    /// Mutable parameter visit, matching [`StackedSsm::visit_params`] order.
    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.embed.w"), &mut self.embed_w);
        f(format!("{prefix}.embed.b"), &mut self.embed_b);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.blocks.{i}.norm.gamma"), &mut layer.norm_gamma);
            f(format!("{prefix}.blocks.{i}.norm.beta"), &mut layer.norm_beta);
            f(format!("{prefix}.blocks.{i}.a"), &mut layer.a_raw);
            f(format!("{prefix}.blocks.{i}.b"), &mut layer.b_proj);
            f(format!("{prefix}.blocks.{i}.fnn.w1"), &mut layer.fnn_w1);
            f(format!("{prefix}.blocks.{i}.fnn.b1"), &mut layer.fnn_b1);
            f(format!("{prefix}.blocks.{i}.fnn.w2"), &mut layer.fnn_w2);
            f(format!("{prefix}.blocks.{i}.fnn.b2"), &mut layer.fnn_b2);
        }
        f(format!("{prefix}.head.w"), &mut self.head_w);
        f(format!("{prefix}.head.b"), &mut self.head_b);
    }

    /// Element-type conversion, used to run verification in f64.
    pub fn cast<T: Real>(&self) -> StackedSsm<T> {
        StackedSsm {
            config: self.config,
            embed_w: self.embed_w.cast(),
            embed_b: self.embed_b.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| SsmLayer {
                    norm_gamma: l.norm_gamma.cast(),
                    norm_beta: l.norm_beta.cast(),
                    a_raw: l.a_raw.cast(),
                    b_proj: l.b_proj.cast(),
                    fnn_w1: l.fnn_w1.cast(),
                    fnn_b1: l.fnn_b1.cast(),
                    fnn_w2: l.fnn_w2.cast(),
                    fnn_b2: l.fnn_b2.cast(),
                })
                .collect(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}
