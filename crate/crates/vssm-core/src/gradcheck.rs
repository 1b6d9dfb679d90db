//! Central-difference verification of reverse-mode gradients.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named parameter store used by the checker. The build closure must
/// register each entry on the tape under its map key.
pub type ParamStore = BTreeMap<String, Tensor<f64>>;

/// Worst element of one parameter block.
#[derive(Debug, Clone)]
pub struct FdEntry {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Per-parameter comparison of backward() against central differences.
#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub per_param: BTreeMap<String, FdEntry>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .values()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Relative error with an absolute floor: gradients smaller than the floor
/// are compared absolutely, so genuinely-zero gradients do not blow up the
/// ratio on finite-difference noise.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Runs `build` once for the analytic gradients, then perturbs every
/// element of every parameter by ±step and compares. `build` must be
/// deterministic (freeze any noise outside the closure).
pub fn finite_difference_check<F>(params: &ParamStore, step: f64, build: F) -> Result<FdReport>
where
    F: Fn(&ParamStore, &mut Tape<f64>) -> Var,
{
    if step == 0.0 || !step.is_finite() {
        return Err(Error::usage("finite-difference step must be nonzero"));
    }

    let mut tape = Tape::new();
    let loss = build(params, &mut tape);
    let grads = tape.backward_all(loss)?;

    let eval = |p: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let l = build(p, &mut t);
        t.value(l).data()[0]
    };

    let mut report = FdReport::default();
    for (name, tensor) in params {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::usage("parameter not registered by build closure"))?;
        let mut entry = FdEntry {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..tensor.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += step;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic.data()[idx];
            let e = rel_err(a, numeric);
            if e > entry.max_rel_err {
                entry.max_rel_err = e;
                entry.worst_index = idx;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.per_param.insert(name.clone(), entry);
    }
    Ok(report)
}

/// Like [`finite_difference_check`] but only probes `max_per_block`
/// deterministically-strided elements of each parameter — for models where
/// probing every element is too slow.
pub fn finite_difference_check_sampled<F>(
    params: &ParamStore,
    step: f64,
    max_per_block: usize,
    build: F,
) -> Result<FdReport>
where
    F: Fn(&ParamStore, &mut Tape<f64>) -> Var,
{
    if step == 0.0 || !step.is_finite() {
        return Err(Error::usage("finite-difference step must be nonzero"));
    }
    if max_per_block == 0 {
        return Err(Error::usage("max_per_block must be positive"));
    }

    let mut tape = Tape::new();
    let loss = build(params, &mut tape);
    let grads = tape.backward_all(loss)?;

    let eval = |p: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let l = build(p, &mut t);
        t.value(l).data()[0]
    };

    let mut report = FdReport::default();
    for (name, tensor) in params {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::usage("parameter not registered by build closure"))?;
        let n = tensor.numel();
        let stride = (n / max_per_block).max(1);
        let mut entry = FdEntry {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut idx = 0;
        while idx < n {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += step;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic.data()[idx];
            let e = rel_err(a, numeric);
            if e > entry.max_rel_err {
                entry.max_rel_err = e;
                entry.worst_index = idx;
                entry.analytic = a;
                entry.numeric = numeric;
            }
            idx += stride;
        }
        report.per_param.insert(name.clone(), entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngKey, Role};
    use alloc::string::ToString;
    use alloc::vec;

    fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore {
        entries
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    #[test]
    fn quadratic_loss_is_exact_to_rounding() {
        let params = store(&[(
            "x",
            Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap(),
        )]);
        let report = finite_difference_check(&params, 1e-4, |p, tape| {
            let x = tape.param("x", &p["x"]);
            let sq = tape.mul_elem(x, x);
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(report.max_rel_err() <= 1e-6, "{report:?}");
    }

    #[test]
    fn zero_step_is_a_usage_error() {
        let params = store(&[("x", Tensor::new(&[1], vec![1.0]).unwrap())]);
        let r = finite_difference_check(&params, 0.0, |p, tape| {
            let x = tape.param("x", &p["x"]);
            tape.sum_all(x)
        });
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let key = RngKey::new(31);
        let s = key.stream(Role::Init, 0, 0);
        let a = Tensor::new(
            &[3, 4],
            (0..12).map(|i| s.uniform(i) * 2.0 - 1.0).collect(),
        )
        .unwrap();
        let s2 = key.stream(Role::Init, 0, 1);
        let b = Tensor::new(
            &[4, 2],
            (0..8).map(|i| s2.uniform(i) * 2.0 - 1.0).collect(),
        )
        .unwrap();
        let params = store(&[("a", a), ("b", b)]);
        let report = finite_difference_check(&params, 1e-4, |p, tape| {
            let a = tape.param("a", &p["a"]);
            let b = tape.param("b", &p["b"]);
            let c = tape.matmul(a, b);
            tape.sum_all(c)
        })
        .unwrap();
        assert!(report.max_rel_err() <= 1e-3, "{report:?}");
    }

    #[test]
    fn composite_ops_gradcheck() {
        // Exercises bias, layer norm, silu, tanh, softmax, log-softmax, exp,
        // channel drive and the scan in one composite loss.
        let key = RngKey::new(77);
        let mk = |comp: u32, shape: &[usize], lo: f64, hi: f64| {
            let s = key.stream(Role::Init, 0, comp);
            let n: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..n).map(|i| lo + (hi - lo) * s.uniform(i as u64)).collect(),
            )
            .unwrap()
        };
        let params = store(&[
            ("x", mk(0, &[5, 3], -1.0, 1.0)),
            ("gamma", mk(1, &[3], 0.5, 1.5)),
            ("beta", mk(2, &[3], -0.2, 0.2)),
            ("drive", mk(3, &[3, 2], -1.0, 1.0)),
            ("a_raw", mk(4, &[6], -1.0, 1.0)),
            ("h0", mk(5, &[6], -0.5, 0.5)),
            ("w", mk(6, &[6, 4], -0.7, 0.7)),
            ("bias", mk(7, &[4], -0.3, 0.3)),
        ]);
        let report = finite_difference_check(&params, 1e-5, |p, tape| {
            let x = tape.param("x", &p["x"]);
            let gamma = tape.param("gamma", &p["gamma"]);
            let beta = tape.param("beta", &p["beta"]);
            let drive = tape.param("drive", &p["drive"]);
            let a_raw = tape.param("a_raw", &p["a_raw"]);
            let h0 = tape.param("h0", &p["h0"]);
            let w = tape.param("w", &p["w"]);
            let bias = tape.param("bias", &p["bias"]);

            let n = tape.layer_norm(x, gamma, beta, 1e-6);
            let u = tape.channel_drive(n, drive);
            let a = tape.tanh(a_raw);
            let h = tape.scan(u, a, h0, crate::ssm::ScanMode::Sequential);
            let f = tape.matmul(h, w);
            let f = tape.add_row_bias(f, bias);
            let f = tape.silu(f);
            let ls = tape.log_softmax(f);
            let sm = tape.softmax(f);
            let prod = tape.mul_elem(sm, ls);
            let e = tape.exp(ls);
            let both = tape.add(prod, e);
            let s = tape.sum_all(both);
            let s = tape.scale(s, 0.5);
            tape.add_const(s, 1.0)
        })
        .unwrap();
        assert!(report.max_rel_err() <= 1e-3, "{report:?}");
    }
}
