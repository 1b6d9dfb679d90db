//! The training loop: shuffled batches, per-epoch validation, checkpoint
//! selection, learning-rate grid iteration, and bit-exact resume.
//!
//! Determinism contract: every random draw derives from
//! (seed, lr-index, epoch, step, item), never from history, so restarting
//! from a saved trainer state reproduces the continuation exactly and the
//! thread count changes only wall time (per-item results merge in item
//! order).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vssm_core::checkpoint;
use vssm_core::eval::{is_log_likelihood, is_partial_log_likelihood};
use vssm_core::model::{ObjectiveCfg, Vssm};
use vssm_core::rng::RngKey;
use vssm_core::sampling::SsmBaseline;
use vssm_core::tensor::Tensor;
use vssm_core::train::{
    apply_batch, baseline_nll, grad_one_item, train_step_baseline, Adam, TrainStepCfg,
};

use crate::config::RunConfig;
use crate::data::{epoch_order, SequenceDataset};
use crate::{io_config, CmdError, CmdResult};

/// Cap on items used for the per-epoch validation curves.
const VALID_ELBO_ITEMS: usize = 256;
const VALID_LL_ITEMS: usize = 64;

/// One line of metrics.jsonl.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_elbo: f64,
    pub train_recon: f64,
    pub train_kl: f64,
    pub train_partial: f64,
    pub valid_elbo: f64,
    /// Validation ELBO per observed scalar (nats / (T*D)).
    pub valid_elbo_per_dim: f64,
    pub valid_partial_loss: f64,
    /// Importance-sampled validation log-likelihood (reduced K).
    pub valid_full_ll: f64,
    pub valid_partial_ll: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineEpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub valid_nll: f64,
}

#[derive(Debug, Clone, Serialize)]
struct TimingRecord {
    epoch: usize,
    lr: f64,
    seconds: f64,
}

/// Result of one grid entry.
pub struct TrainOutcome {
    pub model: Vssm<f32>,
    pub adam: Adam,
    pub best_model: Vssm<f32>,
    pub best_valid_elbo: f64,
    pub records: Vec<EpochRecord>,
}

fn thread_pool(threads: usize) -> CmdResult<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| CmdError::config(format!("thread pool: {e}")))
}

/// One optimizer step, optionally fanned out over a pool; results merge in
/// item order either way.
fn batch_step(
    model: &mut Vssm<f32>,
    adam: &mut Adam,
    batch: &[&Tensor<f32>],
    cfg: TrainStepCfg,
    step_key: RngKey,
    pool: Option<&rayon::ThreadPool>,
) -> vssm_core::error::Result<vssm_core::train::StepMetrics> {
    let results = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            batch
                .par_iter()
                .enumerate()
                .map(|(i, x)| grad_one_item(model, x, cfg, step_key.child(i as u64)))
                .collect::<vssm_core::error::Result<Vec<_>>>()
        })?,
        None => {
            let mut out = Vec::with_capacity(batch.len());
            for (i, x) in batch.iter().enumerate() {
                out.push(grad_one_item(model, x, cfg, step_key.child(i as u64))?);
            }
            out
        }
    };
    apply_batch(model, adam, &results, cfg.lambda)
}

struct ValidScores {
    elbo: f64,
    elbo_per_dim: f64,
    partial_loss: f64,
    full_ll: f64,
    partial_ll: f64,
}

/// Validation pass with fixed noise keys, so the curve is comparable
/// across epochs and byte-reproducible; items fan out over the pool and
/// reduce in index order.
fn validate(
    model: &Vssm<f32>,
    valid: &SequenceDataset,
    cfg: &RunConfig,
    objective: ObjectiveCfg,
    pool: Option<&rayon::ThreadPool>,
) -> CmdResult<ValidScores> {
    let key = RngKey::new(cfg.seed ^ 0x7661_6c69);
    let c = model.hyper.t_len / 2;

    let n_elbo = valid.len().min(VALID_ELBO_ITEMS);
    let elbo_item = |(i, x): (usize, &Tensor<f32>)| -> vssm_core::error::Result<(f64, f64)> {
        let out = model.elbo(x, key.child(i as u64), objective)?;
        let partial = model.partial_posterior_loss(x, c, key.child(i as u64), objective)?;
        Ok((out.elbo, partial))
    };
    let elbo_pairs: Vec<(f64, f64)> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            valid.items[..n_elbo]
                .par_iter()
                .enumerate()
                .map(elbo_item)
                .collect::<vssm_core::error::Result<_>>()
        })?,
        None => valid.items[..n_elbo]
            .iter()
            .enumerate()
            .map(elbo_item)
            .collect::<vssm_core::error::Result<_>>()?,
    };
    let elbo = elbo_pairs.iter().map(|p| p.0).sum::<f64>() / n_elbo as f64;
    let partial_loss = elbo_pairs.iter().map(|p| p.1).sum::<f64>() / n_elbo as f64;

    let n_ll = valid.len().min(VALID_LL_ITEMS);
    let ll_item = |(i, x): (usize, &Tensor<f32>)| -> vssm_core::error::Result<(f64, f64)> {
        let item_key = key.child(0x11_0000 + i as u64);
        let full = is_log_likelihood(model, x, cfg.eval_k, item_key)?.estimate_nats;
        let partial = is_partial_log_likelihood(model, x, c, cfg.eval_k, item_key)?.estimate_nats;
        Ok((full, partial))
    };
    let ll_pairs: Vec<(f64, f64)> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            valid.items[..n_ll]
                .par_iter()
                .enumerate()
                .map(ll_item)
                .collect::<vssm_core::error::Result<_>>()
        })?,
        None => valid.items[..n_ll]
            .iter()
            .enumerate()
            .map(ll_item)
            .collect::<vssm_core::error::Result<_>>()?,
    };
    let full_ll = ll_pairs.iter().map(|p| p.0).sum::<f64>() / n_ll as f64;
    let partial_ll = ll_pairs.iter().map(|p| p.1).sum::<f64>() / n_ll as f64;

    let dim = (model.hyper.t_len * model.hyper.obs_dim) as f64;
    Ok(ValidScores {
        elbo,
        elbo_per_dim: elbo / dim,
        partial_loss,
        full_ll,
        partial_ll,
    })
}

// ── Trainer state (bit-exact resume) ────────────────────────────────

const STATE_MAGIC: &[u8; 4] = b"VSST";

/// Serialized trainer state: model checkpoint bytes plus optimizer
/// moments and loop position.
pub fn encode_trainer_state(
    model: &Vssm<f32>,
    adam: &Adam,
    lr_index: usize,
    next_epoch: usize,
) -> Vec<u8> {
    let ckpt = checkpoint::encode_vssm(model);
    let (t, entries) = adam.export_state();
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(lr_index as u32).to_le_bytes());
    out.extend_from_slice(&(next_epoch as u32).to_le_bytes());
    out.extend_from_slice(&adam.lr.to_le_bytes());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&(ckpt.len() as u64).to_le_bytes());
    out.extend_from_slice(&ckpt);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, m, v) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.len() as u32).to_le_bytes());
        for x in m {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub struct TrainerState {
    pub model: Vssm<f32>,
    pub adam: Adam,
    pub lr_index: usize,
    pub next_epoch: usize,
}

pub fn decode_trainer_state(bytes: &[u8]) -> CmdResult<TrainerState> {
    let fail = || CmdError::data("corrupt trainer state");
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> CmdResult<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(fail());
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != STATE_MAGIC {
        return Err(fail());
    }
    let u32_at = |pos: &mut usize| -> CmdResult<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    if u32_at(&mut pos)? != 1 {
        return Err(CmdError::data("unsupported trainer-state version"));
    }
    let lr_index = u32_at(&mut pos)? as usize;
    let next_epoch = u32_at(&mut pos)? as usize;
    let lr = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let t = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let ckpt_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let model = checkpoint::decode_vssm(take(&mut pos, ckpt_len)?)
        .map_err(|e| CmdError::data(format!("trainer state: {e}")))?;
    let count = u32_at(&mut pos)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_at(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec()).map_err(|_| fail())?;
        let len = u32_at(&mut pos)? as usize;
        let mut m = Vec::with_capacity(len);
        for _ in 0..len {
            m.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        entries.push((name, m, v));
    }
    if pos != bytes.len() {
        return Err(fail());
    }
    Ok(TrainerState {
        model,
        adam: Adam::import_state(lr, t, entries),
        lr_index,
        next_epoch,
    })
}

// ── Output plumbing ─────────────────────────────────────────────────

pub struct RunWriter {
    out_dir: PathBuf,
    metrics: std::fs::File,
    timings: std::fs::File,
}

impl RunWriter {
    pub fn create(out_dir: &Path) -> CmdResult<RunWriter> {
        std::fs::create_dir_all(out_dir).map_err(|e| io_config(out_dir, e))?;
        let metrics = std::fs::File::create(out_dir.join("metrics.jsonl"))
            .map_err(|e| io_config(out_dir, e))?;
        let timings = std::fs::File::create(out_dir.join("timings.jsonl"))
            .map_err(|e| io_config(out_dir, e))?;
        Ok(RunWriter {
            out_dir: out_dir.to_path_buf(),
            metrics,
            timings,
        })
    }

    fn record(&mut self, value: &impl Serialize) -> CmdResult<()> {
        let line = serde_json::to_string(value)
            .map_err(|e| CmdError::config(format!("serialize record: {e}")))?;
        writeln!(self.metrics, "{line}").map_err(|e| io_config(&self.out_dir, e))
    }

    fn timing(&mut self, value: &TimingRecord) -> CmdResult<()> {
        let line = serde_json::to_string(value)
            .map_err(|e| CmdError::config(format!("serialize record: {e}")))?;
        writeln!(self.timings, "{line}").map_err(|e| io_config(&self.out_dir, e))
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> CmdResult<PathBuf> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| io_config(&path, e))?;
        Ok(path)
    }
}

// ── The loop ────────────────────────────────────────────────────────

/// Trains one grid entry; epochs run from `start_epoch` (for resume).
/// Returns the final and the best-validation models.
#[allow(clippy::too_many_arguments)]
pub fn train(
    mut model: Vssm<f32>,
    mut adam: Adam,
    lr_index: usize,
    start_epoch: usize,
    train_set: &SequenceDataset,
    valid_set: &SequenceDataset,
    cfg: &RunConfig,
    writer: &mut RunWriter,
) -> CmdResult<TrainOutcome> {
    let objective = ObjectiveCfg {
        hard: cfg.hard_latents,
        mode: cfg.train_mode(),
    };
    let step_cfg = TrainStepCfg {
        lambda: cfg.lambda,
        objective,
    };
    let pool = thread_pool(cfg.threads)?;
    let root = RngKey::new(cfg.seed).child(lr_index as u64);
    let lr = adam.lr;

    let mut best_valid_elbo = f64::NEG_INFINITY;
    let mut best_model = model.clone();
    let mut records = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut sums = vssm_core::train::StepMetrics::default();
        let mut steps = 0usize;

        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &train_set.items[i]).collect();
            let step_key = root.child(epoch as u64).child(step as u64);
            let metrics = batch_step(&mut model, &mut adam, &batch, step_cfg, step_key, pool.as_ref())
                .map_err(|e| match e {
                    vssm_core::Error::Numeric(m) => {
                        // Preserve the failing state for inspection.
                        let dump = encode_trainer_state(&model, &adam, lr_index, epoch);
                        let _ = writer.write_file("state_abort.vsst", &dump);
                        CmdError::Numeric(format!("epoch {epoch} step {step}: {m}"))
                    }
                    other => other.into(),
                })?;
            sums.loss += metrics.loss;
            sums.elbo += metrics.elbo;
            sums.reconstruction += metrics.reconstruction;
            sums.kl += metrics.kl;
            sums.partial += metrics.partial;
            steps += 1;
        }
        let inv = 1.0 / steps.max(1) as f64;

        let scores = validate(&model, valid_set, cfg, objective, pool.as_ref())?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: sums.loss * inv,
            train_elbo: sums.elbo * inv,
            train_recon: sums.reconstruction * inv,
            train_kl: sums.kl * inv,
            train_partial: sums.partial * inv,
            valid_elbo: scores.elbo,
            valid_elbo_per_dim: scores.elbo_per_dim,
            valid_partial_loss: scores.partial_loss,
            valid_full_ll: scores.full_ll,
            valid_partial_ll: scores.partial_ll,
        };
        writer.record(&record)?;
        writer.timing(&TimingRecord {
            epoch: epoch + 1,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        })?;
        println!(
            "lr {lr:.0e} epoch {:>3}: loss {:>10.2} elbo {:>10.2} kl {:>8.2} partial {:>8.2} | valid elbo/dim {:>7.3} ll {:>9.2}",
            epoch + 1,
            record.train_loss,
            record.train_elbo,
            record.train_kl,
            record.train_partial,
            record.valid_elbo_per_dim,
            record.valid_full_ll,
        );

        if scores.elbo > best_valid_elbo {
            best_valid_elbo = scores.elbo;
            best_model = model.clone();
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            writer.write_file(
                &format!("checkpoint_epoch_{:04}.vssm", epoch + 1),
                &checkpoint::encode_vssm(&model),
            )?;
            writer.write_file(
                &format!("state_epoch_{:04}.vsst", epoch + 1),
                &encode_trainer_state(&model, &adam, lr_index, epoch + 1),
            )?;
        }
        records.push(record);
    }

    Ok(TrainOutcome {
        model,
        adam,
        best_model,
        best_valid_elbo,
        records,
    })
}

/// Runs every grid entry and keeps the checkpoint with the best
/// validation ELBO. Writes checkpoint_best.vssm and checkpoint_final.vssm.
pub fn train_grid(
    train_set: &SequenceDataset,
    valid_set: &SequenceDataset,
    cfg: &RunConfig,
    resume: Option<TrainerState>,
    writer: &mut RunWriter,
) -> CmdResult<Vssm<f32>> {
    let hyper = cfg.hyper(train_set.t_len, train_set.obs_dim);
    let mut best: Option<(f64, Vssm<f32>)> = None;
    let mut final_model = None;

    let (start_lr_index, mut resume_state) = match resume {
        Some(state) => (state.lr_index, Some(state)),
        None => (0, None),
    };

    for (lr_index, &lr) in cfg.lr_grid.iter().enumerate().skip(start_lr_index) {
        let (model, adam, start_epoch) = match resume_state.take() {
            Some(state) if state.lr_index == lr_index => {
                (state.model, state.adam, state.next_epoch)
            }
            _ => {
                let model = Vssm::init(hyper, RngKey::new(cfg.seed))
                    .map_err(CmdError::from)?;
                (model, Adam::new(lr), 0)
            }
        };
        let outcome = train(
            model, adam, lr_index, start_epoch, train_set, valid_set, cfg, writer,
        )?;
        if best
            .as_ref()
            .map(|(score, _)| outcome.best_valid_elbo > *score)
            .unwrap_or(true)
        {
            best = Some((outcome.best_valid_elbo, outcome.best_model));
        }
        final_model = Some(outcome.model);
    }

    let (_, best_model) = best.expect("non-empty grid");
    writer.write_file("checkpoint_best.vssm", &checkpoint::encode_vssm(&best_model))?;
    if let Some(m) = &final_model {
        writer.write_file("checkpoint_final.vssm", &checkpoint::encode_vssm(m))?;
    }
    Ok(best_model)
}

/// Baseline training: teacher-forced NLL, same split and selection scheme.
pub fn train_baseline_grid(
    train_set: &SequenceDataset,
    valid_set: &SequenceDataset,
    cfg: &RunConfig,
    writer: &mut RunWriter,
) -> CmdResult<SsmBaseline<f32>> {
    let mut best: Option<(f64, SsmBaseline<f32>)> = None;
    for &lr in &cfg.lr_grid {
        let mut baseline = SsmBaseline::init(
            train_set.t_len,
            train_set.obs_dim,
            cfg.sigma,
            cfg.width,
            cfg.state,
            cfg.hidden,
            cfg.layers,
            RngKey::new(cfg.seed),
        );
        let mut adam = Adam::new(lr);
        let mode = cfg.train_mode();
        for epoch in 0..cfg.epochs {
            let started = Instant::now();
            let order = epoch_order(train_set.len(), cfg.seed, epoch);
            let mut train_nll = 0.0;
            let mut steps = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<Tensor<f32>> =
                    chunk.iter().map(|&i| train_set.items[i].clone()).collect();
                train_nll += train_step_baseline(&mut baseline, &mut adam, &batch, mode)
                    .map_err(CmdError::from)?;
                steps += 1;
            }
            train_nll /= steps.max(1) as f64;
            let n_valid = valid_set.len().min(VALID_ELBO_ITEMS);
            let mut valid_nll = 0.0;
            for x in &valid_set.items[..n_valid] {
                valid_nll += baseline_nll(&baseline, x, mode).map_err(CmdError::from)?;
            }
            valid_nll /= n_valid.max(1) as f64;
            writer.record(&BaselineEpochRecord {
                epoch: epoch + 1,
                lr,
                train_nll,
                valid_nll,
            })?;
            writer.timing(&TimingRecord {
                epoch: epoch + 1,
                lr,
                seconds: started.elapsed().as_secs_f64(),
            })?;
            println!(
                "baseline lr {lr:.0e} epoch {:>3}: train nll {train_nll:>10.2} valid nll {valid_nll:>10.2}",
                epoch + 1
            );
            if best
                .as_ref()
                .map(|(score, _)| valid_nll < *score)
                .unwrap_or(true)
            {
                best = Some((valid_nll, baseline.clone()));
            }
        }
    }
    let (_, best_baseline) = best.expect("non-empty grid");
    writer.write_file(
        "checkpoint_best.vssm",
        &checkpoint::encode_baseline(&best_baseline),
    )?;
    Ok(best_baseline)
}

// ── The train subcommand ────────────────────────────────────────────

pub struct TrainArgs {
    pub dataset: String,
    pub arch: String,
    pub threads: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Vec<f64>,
    pub lambda: Option<f64>,
    pub max_items: Option<usize>,
    pub resume: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn cmd_train(mut cfg: RunConfig, args: &TrainArgs) -> CmdResult<()> {
    if let Some(v) = args.threads {
        cfg.threads = v.max(1);
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if !args.lr.is_empty() {
        cfg.lr_grid = args.lr.clone();
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.max_items {
        cfg.max_items = v;
    }
    cfg.validate()?;

    let mut dataset = crate::data::resolve_dataset(&args.dataset, cfg.seed)?;
    dataset.truncate(cfg.max_items);
    if dataset.len() < 2 {
        return Err(CmdError::data("dataset has fewer than 2 items"));
    }
    let (train_set, valid_set) =
        crate::data::split_train_valid(&dataset, cfg.valid_fraction, cfg.seed)?;
    println!(
        "dataset: {} train / {} valid items of [{}, {}]",
        train_set.len(),
        valid_set.len(),
        dataset.t_len,
        dataset.obs_dim
    );

    let mut writer = RunWriter::create(&args.out)?;
    crate::sample::write_json(&args.out.join("config.json"), &cfg)?;

    match args.arch.as_str() {
        "vssm" => {
            let resume = match &args.resume {
                Some(path) => {
                    let bytes = std::fs::read(path).map_err(|e| crate::io_data(path, e))?;
                    Some(decode_trainer_state(&bytes)?)
                }
                None => None,
            };
            train_grid(&train_set, &valid_set, &cfg, resume, &mut writer)?;
        }
        "baseline" => {
            train_baseline_grid(&train_set, &valid_set, &cfg, &mut writer)?;
        }
        other => {
            return Err(CmdError::config(format!(
                "unknown architecture '{other}' (expected vssm or baseline)"
            )));
        }
    }
    println!("run artifacts in {}", args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::data::synthetic_digits;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        cfg.z_comp = 2;
        cfg.n_cat = 4;
        cfg.width = 8;
        cfg.state = 2;
        cfg.hidden = 8;
        cfg.layers = 1;
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.max_items = 0;
        cfg.eval_k = 2;
        cfg
    }

    fn tiny_sets() -> (SequenceDataset, SequenceDataset) {
        let ds = synthetic_digits(48, 1);
        crate::data::split_train_valid(&ds, 0.25, 0).unwrap()
    }

    #[test]
    fn trainer_state_round_trips() {
        let cfg = tiny_cfg();
        let hyper = cfg.hyper(28, 28);
        let mut model = Vssm::init(hyper, RngKey::new(3)).unwrap();
        let mut adam = Adam::new(1e-3);
        let (train_set, _) = tiny_sets();
        let batch: Vec<&Tensor<f32>> = train_set.items[..4].iter().collect();
        batch_step(
            &mut model,
            &mut adam,
            &batch,
            TrainStepCfg::default(),
            RngKey::new(5),
            None,
        )
        .unwrap();

        let bytes = encode_trainer_state(&model, &adam, 0, 7);
        let state = decode_trainer_state(&bytes).unwrap();
        assert_eq!(state.next_epoch, 7);
        assert_eq!(state.lr_index, 0);
        assert_eq!(state.model, model);
        assert_eq!(state.adam.steps_taken(), adam.steps_taken());
        assert!(decode_trainer_state(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn threaded_batch_step_matches_serial_exactly() {
        let cfg = tiny_cfg();
        let hyper = cfg.hyper(28, 28);
        let (train_set, _) = tiny_sets();
        let batch: Vec<&Tensor<f32>> = train_set.items[..8].iter().collect();

        let mut m1 = Vssm::init(hyper, RngKey::new(4)).unwrap();
        let mut a1 = Adam::new(1e-3);
        let s1 = batch_step(&mut m1, &mut a1, &batch, TrainStepCfg::default(), RngKey::new(6), None)
            .unwrap();

        let mut m2 = Vssm::init(hyper, RngKey::new(4)).unwrap();
        let mut a2 = Adam::new(1e-3);
        let pool = thread_pool(2).unwrap();
        let s2 = batch_step(
            &mut m2,
            &mut a2,
            &batch,
            TrainStepCfg::default(),
            RngKey::new(6),
            pool.as_ref(),
        )
        .unwrap();

        assert_eq!(s1.loss, s2.loss);
        assert_eq!(m1, m2);
    }

    #[test]
    fn resume_reproduces_uninterrupted_training() {
        let cfg = tiny_cfg();
        let (train_set, valid_set) = tiny_sets();
        let dir = tempfile::tempdir().unwrap();

        // Uninterrupted: 2 epochs.
        let hyper = cfg.hyper(28, 28);
        let mut w1 = RunWriter::create(&dir.path().join("a")).unwrap();
        let model = Vssm::init(hyper, RngKey::new(cfg.seed)).unwrap();
        let full = train(
            model,
            Adam::new(cfg.lr_grid[0]),
            0,
            0,
            &train_set,
            &valid_set,
            &cfg,
            &mut w1,
        )
        .unwrap();

        // Interrupted after epoch 1, then resumed.
        let mut w2 = RunWriter::create(&dir.path().join("b")).unwrap();
        let model = Vssm::init(hyper, RngKey::new(cfg.seed)).unwrap();
        let mut cfg1 = cfg.clone();
        cfg1.epochs = 1;
        let part = train(
            model,
            Adam::new(cfg.lr_grid[0]),
            0,
            0,
            &train_set,
            &valid_set,
            &cfg1,
            &mut w2,
        )
        .unwrap();
        let state_bytes = encode_trainer_state(&part.model, &part.adam, 0, 1);
        let state = decode_trainer_state(&state_bytes).unwrap();
        let resumed = train(
            state.model,
            state.adam,
            0,
            state.next_epoch,
            &train_set,
            &valid_set,
            &cfg,
            &mut w2,
        )
        .unwrap();

        assert_eq!(full.model, resumed.model);
        let last_full = &full.records[1];
        let last_resumed = &resumed.records[0];
        assert_eq!(last_full.train_loss, last_resumed.train_loss);
        assert_eq!(last_full.valid_elbo, last_resumed.valid_elbo);
    }
}
