//! The eval subcommand: per-sequence and aggregate likelihood records.

use std::io::Write;
use std::path::PathBuf;

use serde::Serialize;
use vssm_core::checkpoint;
use vssm_core::eval::{is_log_likelihood, is_partial_log_likelihood};
use vssm_core::rng::RngKey;

use crate::sample::write_json;
use crate::{data, io_config, CmdError, CmdResult};

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: String,
    pub k: usize,
    pub cuts: Option<String>,
    pub limit: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// One line of eval.jsonl.
#[derive(Debug, Clone, Serialize)]
struct EvalRecord {
    sequence_id: usize,
    mode: &'static str,
    c: usize,
    k: usize,
    estimate_nats: f64,
    weight_spread: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Aggregate {
    mode: &'static str,
    c: usize,
    k: usize,
    count: usize,
    mean_estimate_nats: f64,
}

pub fn cmd_eval(args: &EvalArgs) -> CmdResult<()> {
    if args.k < 1 {
        return Err(CmdError::config("k must be at least 1"));
    }
    let bytes = std::fs::read(&args.checkpoint).map_err(|e| crate::io_data(&args.checkpoint, e))?;
    let model = checkpoint::decode_vssm(&bytes)
        .map_err(|e| CmdError::config(format!("{}: {e}", args.checkpoint.display())))?;
    let h = model.hyper;

    let ds = data::resolve_dataset(&args.dataset, args.seed)?;
    if ds.t_len != h.t_len || ds.obs_dim != h.obs_dim {
        return Err(CmdError::config(format!(
            "checkpoint expects [{}, {}] sequences, dataset has [{}, {}]",
            h.t_len, h.obs_dim, ds.t_len, ds.obs_dim
        )));
    }
    let n = if args.limit == 0 {
        ds.len()
    } else {
        ds.len().min(args.limit)
    };

    let cuts: Vec<usize> = match &args.cuts {
        Some(s) => crate::cli::parse_usize_list(s).map_err(CmdError::config)?,
        None => vec![h.t_len / 2],
    };
    for &c in &cuts {
        if c >= h.t_len {
            return Err(CmdError::config(format!(
                "cut {c} must be below the sequence length {}",
                h.t_len
            )));
        }
    }

    std::fs::create_dir_all(&args.out).map_err(|e| io_config(&args.out, e))?;
    let path = args.out.join("eval.jsonl");
    let mut file = std::fs::File::create(&path).map_err(|e| io_config(&path, e))?;
    let root = RngKey::new(args.seed);

    let mut records: Vec<EvalRecord> = Vec::new();
    for (i, x) in ds.items[..n].iter().enumerate() {
        let key = root.child(i as u64);
        let report = is_log_likelihood(&model, x, args.k, key)?;
        records.push(EvalRecord {
            sequence_id: i,
            mode: "full",
            c: 0,
            k: args.k,
            estimate_nats: report.estimate_nats,
            weight_spread: report.weight_spread,
        });
        for &c in &cuts {
            let report = is_partial_log_likelihood(&model, x, c, args.k, key)?;
            records.push(EvalRecord {
                sequence_id: i,
                mode: "partial",
                c,
                k: args.k,
                estimate_nats: report.estimate_nats,
                weight_spread: report.weight_spread,
            });
        }
    }
    for r in &records {
        let line = serde_json::to_string(r)
            .map_err(|e| CmdError::config(format!("serialize record: {e}")))?;
        writeln!(file, "{line}").map_err(|e| io_config(&path, e))?;
    }

    // Aggregates: the mean of the per-sequence records per (mode, c).
    let mut aggregates = Vec::new();
    let mut groups: Vec<(&'static str, usize)> = vec![("full", 0)];
    groups.extend(cuts.iter().map(|&c| ("partial", c)));
    for (mode, c) in groups {
        let values: Vec<f64> = records
            .iter()
            .filter(|r| r.mode == mode && r.c == c)
            .map(|r| r.estimate_nats)
            .collect();
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        aggregates.push(Aggregate {
            mode,
            c,
            k: args.k,
            count: values.len(),
            mean_estimate_nats: mean,
        });
    }
    write_json(&args.out.join("eval_aggregate.json"), &aggregates)?;

    println!("{:<8} {:>4} {:>6} {:>14}", "mode", "c", "count", "mean nats");
    for a in &aggregates {
        println!(
            "{:<8} {:>4} {:>6} {:>14.3}",
            a.mode, a.c, a.count, a.mean_estimate_nats
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vssm_core::model::{Vssm, VssmHyper};

    #[test]
    fn eval_writes_records_and_matching_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let model: Vssm<f32> = Vssm::init(
            VssmHyper {
                t_len: 28,
                obs_dim: 28,
                z_comp: 2,
                n_cat: 3,
                sigma: 0.1,
                tau: 1.0,
                width: 4,
                state: 2,
                hidden: 4,
                layers: 1,
            },
            RngKey::new(5),
        )
        .unwrap();
        let ckpt = dir.path().join("m.vssm");
        std::fs::write(&ckpt, checkpoint::encode_vssm(&model)).unwrap();
        let out = dir.path().join("out");
        cmd_eval(&EvalArgs {
            checkpoint: ckpt,
            dataset: "digits:6".into(),
            k: 5,
            cuts: Some("0,14".into()),
            limit: 4,
            seed: 9,
            out: out.clone(),
        })
        .unwrap();

        let lines: Vec<serde_json::Value> = std::fs::read_to_string(out.join("eval.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        // 4 sequences x (1 full + 2 partial cuts).
        assert_eq!(lines.len(), 12);

        let aggs: Vec<serde_json::Value> =
            serde_json::from_str(&std::fs::read_to_string(out.join("eval_aggregate.json")).unwrap())
                .unwrap();
        for agg in aggs {
            let mode = agg["mode"].as_str().unwrap();
            let c = agg["c"].as_u64().unwrap();
            let mean = agg["mean_estimate_nats"].as_f64().unwrap();
            let matching: Vec<f64> = lines
                .iter()
                .filter(|l| l["mode"] == mode && l["c"].as_u64() == Some(c))
                .map(|l| l["estimate_nats"].as_f64().unwrap())
                .collect();
            let expect = matching.iter().sum::<f64>() / matching.len() as f64;
            assert!((mean - expect).abs() < 1e-12);
        }
    }
}
