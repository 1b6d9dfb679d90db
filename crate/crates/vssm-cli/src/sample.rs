//! The sample subcommand: unconditional and prompt-conditioned generation,
//! image grid plus raw sequences.

use std::path::{Path, PathBuf};

use serde::Serialize;
use vssm_core::checkpoint;
use vssm_core::model::{PaddedPrompt, Vssm};
use vssm_core::rng::RngKey;
use vssm_core::sampling::{open_session, sample_full, step_chunk, GenCounters, SampleCfg};
use vssm_core::tensor::Tensor;

use crate::images::{render_grid, write_pgm, write_ppm, GridTile};
use crate::{data, io_config, CmdError, CmdResult};

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub dataset: Option<String>,
    pub cut: usize,
    pub length: Option<usize>,
    pub chunk: Option<usize>,
    pub samples: usize,
    pub mean_only: bool,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SampleMeta {
    count: usize,
    t_len: usize,
    obs_dim: usize,
    chunk: Option<usize>,
    mean_only: bool,
    /// Prompt length per tile (0 = unconditional).
    cuts: Vec<usize>,
    image: String,
    raw: String,
}

/// Generates one sequence, chunked when a width below T - C is given.
/// Both paths are bit-identical by the stream discipline.
pub fn generate(
    model: &Vssm<f32>,
    prompt: &PaddedPrompt<f32>,
    chunk: Option<usize>,
    key: RngKey,
    cfg: SampleCfg,
    counters: &mut GenCounters,
) -> CmdResult<Tensor<f32>> {
    let remaining = model.hyper.t_len - prompt.c;
    match chunk {
        Some(w) if w > 0 && w < remaining => {
            let mut session = open_session(model, prompt, key, cfg)?;
            while !session.is_done() {
                let width = w.min(session.target_len() - session.position());
                step_chunk(model, &mut session, width)?;
            }
            counters.stacked_forward_evals += session.counters().stacked_forward_evals;
            Ok(session.committed())
        }
        _ => Ok(sample_full(model, prompt, key, cfg, counters)?),
    }
}

pub fn cmd_sample(args: &SampleArgs) -> CmdResult<()> {
    let bytes = std::fs::read(&args.checkpoint).map_err(|e| crate::io_data(&args.checkpoint, e))?;
    let model = checkpoint::decode_vssm(&bytes)
        .map_err(|e| CmdError::config(format!("{}: {e}", args.checkpoint.display())))?;
    let model = match args.length {
        Some(t) => model.with_t_len(t),
        None => model,
    };
    let h = model.hyper;
    if args.cut > h.t_len {
        return Err(CmdError::config(format!(
            "cut {} exceeds sequence length {}",
            args.cut, h.t_len
        )));
    }

    // Prompts from the dataset slice, when given.
    let prompts: Vec<PaddedPrompt<f32>> = match &args.dataset {
        Some(spec) => {
            let ds = data::resolve_dataset(spec, args.seed)?;
            if ds.obs_dim != h.obs_dim {
                return Err(CmdError::config(format!(
                    "checkpoint expects obs_dim {}, dataset has {}",
                    h.obs_dim, ds.obs_dim
                )));
            }
            if ds.t_len < args.cut {
                return Err(CmdError::config("dataset items shorter than the cut"));
            }
            ds.items
                .iter()
                .take(args.samples)
                .map(|x| {
                    let rows =
                        Tensor::new(&[args.cut, h.obs_dim], x.data()[..args.cut * h.obs_dim].to_vec())
                            .expect("prompt rows");
                    PaddedPrompt::new(rows, h.t_len).expect("valid prompt")
                })
                .collect()
        }
        None => Vec::new(),
    };

    std::fs::create_dir_all(&args.out).map_err(|e| io_config(&args.out, e))?;
    let root = RngKey::new(args.seed);
    let cfg = SampleCfg {
        mean_only: args.mean_only,
    };

    // First half unconditional, second half prompt-conditioned (all
    // unconditional without a prompt source).
    let n_cond = if prompts.is_empty() {
        0
    } else {
        (args.samples / 2).min(prompts.len())
    };
    let n_uncond = args.samples - n_cond;

    let mut sequences = Vec::with_capacity(args.samples);
    let mut cuts = Vec::with_capacity(args.samples);
    let mut counters = GenCounters::default();
    for i in 0..args.samples {
        let (prompt, cut) = if i < n_uncond {
            (PaddedPrompt::empty(h.t_len, h.obs_dim), 0)
        } else {
            (prompts[i - n_uncond].clone(), args.cut)
        };
        let seq = generate(
            &model,
            &prompt,
            args.chunk,
            root.child(i as u64),
            cfg,
            &mut counters,
        )?;
        sequences.push(seq);
        cuts.push(cut);
    }

    // Image grid.
    let color = h.obs_dim % 3 == 0 && h.obs_dim >= 48;
    let tiles: Vec<GridTile> = sequences
        .iter()
        .zip(&cuts)
        .map(|(s, &c)| GridTile {
            sequence: s,
            cut: if c > 0 { Some(c) } else { None },
        })
        .collect();
    let (w, hgt, px) = render_grid(&tiles, color);
    let image_name = if color { "grid.ppm" } else { "grid.pgm" };
    let image_path = args.out.join(image_name);
    if color {
        write_ppm(&image_path, w, hgt, &px)?;
    } else {
        write_pgm(&image_path, w, hgt, &px)?;
    }

    // Raw sequences, row-major little-endian f32.
    let raw_path = args.out.join("samples.f32");
    let mut raw = Vec::with_capacity(args.samples * h.t_len * h.obs_dim * 4);
    for s in &sequences {
        for v in s.data() {
            raw.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(&raw_path, raw).map_err(|e| io_config(&raw_path, e))?;

    let meta = SampleMeta {
        count: args.samples,
        t_len: h.t_len,
        obs_dim: h.obs_dim,
        chunk: args.chunk,
        mean_only: args.mean_only,
        cuts,
        image: image_name.to_string(),
        raw: "samples.f32".to_string(),
    };
    write_json(&args.out.join("samples.json"), &meta)?;
    println!(
        "wrote {} sequences ({} prompt-conditioned) to {}",
        args.samples,
        n_cond,
        args.out.display()
    );
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CmdResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CmdError::config(format!("serialize: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| io_config(path, e))
}
