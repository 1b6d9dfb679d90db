//! Generation-latency benchmark: one-shot VSSM sampling, chunked VSSM
//! sampling, and the sequential baseline, timed under identical
//! conditions. Wall-clock numbers always ship next to the instrumented
//! evaluation counters, so the parallel-generation claim stays checkable
//! on noisy machines.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use vssm_core::checkpoint;
use vssm_core::model::{PaddedPrompt, Vssm};
use vssm_core::rng::RngKey;
use vssm_core::sampling::{
    open_session, sample_full, sample_ssm_baseline, step_chunk, GenCounters, SampleCfg, SsmBaseline,
};
use vssm_core::tensor::Tensor;

use crate::sample::write_json;
use crate::{io_config, CmdError, CmdResult};

const WARMUP: usize = 3;

pub struct BenchArgs {
    pub checkpoint: PathBuf,
    pub baseline: PathBuf,
    pub lengths: String,
    pub cut: usize,
    pub chunks: String,
    pub reps: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// One timed configuration.
#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    pub engine: String,
    pub t_len: usize,
    pub c: usize,
    /// Chunk width, 0 for one-shot paths.
    pub w: usize,
    pub reps: usize,
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub stacked_evals: usize,
    pub single_step_evals: usize,
}

#[derive(Debug, Clone, Serialize)]
struct BenchReport {
    cpus: usize,
    os: String,
    arch: String,
    threads: usize,
    points: Vec<BenchPoint>,
    /// baseline mean / one-shot VSSM mean, per length.
    speedups: Vec<(usize, f64)>,
}

fn time_reps(reps: usize, mut f: impl FnMut()) -> (f64, f64, f64) {
    for _ in 0..WARMUP {
        f();
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f();
        times.push(t0.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = times.iter().cloned().fold(0.0f64, f64::max);
    (mean, min, max)
}

/// Times every engine at every length; library-level entry used by the
/// command and the acceptance harness.
pub fn run_bench(
    model: &Vssm<f32>,
    baseline: &SsmBaseline<f32>,
    lengths: &[usize],
    cut: usize,
    chunk_widths: &[usize],
    reps: usize,
    seed: u64,
) -> CmdResult<Vec<BenchPoint>> {
    if reps < 5 {
        return Err(CmdError::config("bench requires at least 5 repetitions"));
    }
    let d = model.hyper.obs_dim;
    if baseline.obs_dim() != d {
        return Err(CmdError::config(
            "vssm and baseline checkpoints disagree on the observation dimension",
        ));
    }
    let key = RngKey::new(seed);
    let cfg = SampleCfg::default();
    let mut points = Vec::new();

    for &t_len in lengths {
        if cut >= t_len {
            return Err(CmdError::config(format!(
                "cut {cut} leaves nothing to generate at length {t_len}"
            )));
        }
        let vssm_t = model.with_t_len(t_len);
        let prompt_rows = Tensor::zeros(&[cut, d]);
        let prompt = PaddedPrompt::new(prompt_rows.clone(), t_len).map_err(CmdError::from)?;

        // One-shot VSSM.
        let mut counters = GenCounters::default();
        sample_full(&vssm_t, &prompt, key, cfg, &mut counters).map_err(CmdError::from)?;
        let (mean, min, max) = time_reps(reps, || {
            let mut c = GenCounters::default();
            sample_full(&vssm_t, &prompt, key, cfg, &mut c).unwrap();
        });
        points.push(BenchPoint {
            engine: "vssm_full".into(),
            t_len,
            c: cut,
            w: 0,
            reps,
            mean_s: mean,
            min_s: min,
            max_s: max,
            stacked_evals: counters.stacked_forward_evals,
            single_step_evals: counters.single_step_evals,
        });

        // Chunked VSSM.
        for &w in chunk_widths {
            if w == 0 || w >= t_len - cut {
                continue;
            }
            let run = || {
                let mut session = open_session(&vssm_t, &prompt, key, cfg).unwrap();
                while !session.is_done() {
                    let width = w.min(session.target_len() - session.position());
                    step_chunk(&vssm_t, &mut session, width).unwrap();
                }
                session
            };
            let counters = run().counters();
            let (mean, min, max) = time_reps(reps, || {
                run();
            });
            points.push(BenchPoint {
                engine: "vssm_chunked".into(),
                t_len,
                c: cut,
                w,
                reps,
                mean_s: mean,
                min_s: min,
                max_s: max,
                stacked_evals: counters.stacked_forward_evals,
                single_step_evals: counters.single_step_evals,
            });
        }

        // Sequential baseline.
        let mut baseline_t = baseline.clone();
        baseline_t.t_len = t_len;
        let mut counters = GenCounters::default();
        sample_ssm_baseline(&baseline_t, &prompt_rows, key, cfg, &mut counters)
            .map_err(CmdError::from)?;
        let (mean, min, max) = time_reps(reps, || {
            let mut c = GenCounters::default();
            sample_ssm_baseline(&baseline_t, &prompt_rows, key, cfg, &mut c).unwrap();
        });
        points.push(BenchPoint {
            engine: "baseline".into(),
            t_len,
            c: cut,
            w: 0,
            reps,
            mean_s: mean,
            min_s: min,
            max_s: max,
            stacked_evals: counters.stacked_forward_evals,
            single_step_evals: counters.single_step_evals,
        });
    }
    Ok(points)
}

pub fn cmd_bench(args: &BenchArgs) -> CmdResult<()> {
    let bytes = std::fs::read(&args.checkpoint).map_err(|e| crate::io_data(&args.checkpoint, e))?;
    let model = checkpoint::decode_vssm(&bytes)
        .map_err(|e| CmdError::config(format!("{}: {e}", args.checkpoint.display())))?;
    let bytes = std::fs::read(&args.baseline).map_err(|e| crate::io_data(&args.baseline, e))?;
    let baseline = checkpoint::decode_baseline(&bytes)
        .map_err(|e| CmdError::config(format!("{}: {e}", args.baseline.display())))?;

    let lengths = crate::cli::parse_usize_list(&args.lengths).map_err(CmdError::config)?;
    let chunks = crate::cli::parse_usize_list(&args.chunks).map_err(CmdError::config)?;
    if lengths.is_empty() {
        return Err(CmdError::config("no lengths given"));
    }

    let points = run_bench(
        &model, &baseline, &lengths, args.cut, &chunks, args.reps, args.seed,
    )?;

    let mut speedups = Vec::new();
    for &t in &lengths {
        let vssm = points
            .iter()
            .find(|p| p.engine == "vssm_full" && p.t_len == t)
            .unwrap();
        let base = points
            .iter()
            .find(|p| p.engine == "baseline" && p.t_len == t)
            .unwrap();
        speedups.push((t, base.mean_s / vssm.mean_s));
    }

    println!(
        "{:<13} {:>6} {:>5} {:>5} {:>11} {:>11} {:>11} {:>8} {:>6}",
        "engine", "T", "C", "W", "mean s", "min s", "max s", "stacked", "steps"
    );
    for p in &points {
        println!(
            "{:<13} {:>6} {:>5} {:>5} {:>11.6} {:>11.6} {:>11.6} {:>8} {:>6}",
            p.engine, p.t_len, p.c, p.w, p.mean_s, p.min_s, p.max_s, p.stacked_evals,
            p.single_step_evals
        );
    }
    for (t, s) in &speedups {
        println!("T={t}: one-shot speedup over baseline {s:.1}x");
    }

    std::fs::create_dir_all(&args.out).map_err(|e| io_config(&args.out, e))?;
    let report = BenchReport {
        cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
        threads: 1,
        points,
        speedups,
    };
    write_json(&args.out.join("bench.json"), &report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vssm_core::model::VssmHyper;

    #[test]
    fn bench_counts_and_guards() {
        let model: Vssm<f32> = Vssm::init(
            VssmHyper {
                t_len: 16,
                obs_dim: 4,
                z_comp: 2,
                n_cat: 3,
                sigma: 0.1,
                tau: 1.0,
                width: 4,
                state: 2,
                hidden: 4,
                layers: 1,
            },
            RngKey::new(1),
        )
        .unwrap();
        let baseline: SsmBaseline<f32> = SsmBaseline::init(16, 4, 0.1, 4, 2, 4, 1, RngKey::new(2));

        assert!(run_bench(&model, &baseline, &[16], 2, &[4], 4, 0).is_err());

        let points = run_bench(&model, &baseline, &[16, 32], 2, &[4], 5, 0).unwrap();
        for p in &points {
            match p.engine.as_str() {
                "vssm_full" => {
                    assert_eq!(p.stacked_evals, 2);
                    assert_eq!(p.single_step_evals, 0);
                }
                "baseline" => {
                    assert_eq!(p.single_step_evals, p.t_len - 2);
                }
                _ => {}
            }
            assert!(p.min_s <= p.mean_s && p.mean_s <= p.max_s);
        }
    }
}
