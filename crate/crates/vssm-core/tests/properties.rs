//! Property tests for the numerical invariants the library leans on.

use proptest::prelude::*;

use vssm_core::kernels;
use vssm_core::model::{gumbel_noise_tensor, PaddedPrompt};
use vssm_core::rng::{RngKey, Role};
use vssm_core::tape::Tape;
use vssm_core::tensor::Tensor;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parallel_scan_matches_sequential(
        t_len in 1usize..200,
        w in 1usize..8,
        seed in any::<u64>(),
    ) {
        let key = RngKey::new(seed);
        let s = key.stream(Role::Init, 0, 0);
        let a: Vec<f64> = (0..w).map(|i| s.uniform(i as u64) * 1.98 - 0.99).collect();
        let s = key.stream(Role::Init, 0, 1);
        let u: Vec<f64> = (0..t_len * w).map(|i| s.uniform(i as u64) * 2.0 - 1.0).collect();
        let s = key.stream(Role::Init, 0, 2);
        let h0: Vec<f64> = (0..w).map(|i| s.uniform(i as u64) * 2.0 - 1.0).collect();

        let hs = kernels::scan_sequential(&a, &u, &h0, t_len);
        let hp = kernels::scan_parallel(&a, &u, &h0, t_len);
        for i in 0..t_len * w {
            prop_assert!(close(hs[i], hp[i], 1e-9), "i={} {} vs {}", i, hs[i], hp[i]);
        }
    }

    #[test]
    fn scan_combinator_is_associative(seed in any::<u64>()) {
        // (a1,b1) o (a2,b2) = (a2*a1, a2*b1 + b2), left element earlier.
        let s = RngKey::new(seed).stream(Role::Init, 1, 0);
        let v: Vec<f64> = (0..6).map(|i| s.uniform(i) * 2.0 - 1.0).collect();
        let (e1, e2, e3) = ((v[0], v[1]), (v[2], v[3]), (v[4], v[5]));
        let compose = |x: (f64, f64), y: (f64, f64)| (y.0 * x.0, y.0 * x.1 + y.1);
        let left = compose(compose(e1, e2), e3);
        let right = compose(e1, compose(e2, e3));
        prop_assert!((left.0 - right.0).abs() < 1e-6);
        prop_assert!((left.1 - right.1).abs() < 1e-6);
    }

    #[test]
    fn log_softmax_exponentiates_to_one(
        n in 1usize..24,
        rows in 1usize..6,
        seed in any::<u64>(),
    ) {
        let s = RngKey::new(seed).stream(Role::Init, 2, 0);
        let x: Vec<f64> = (0..rows * n).map(|i| s.uniform(i as u64) * 40.0 - 20.0).collect();
        let lsm = kernels::log_softmax_rows(&x, rows, n);
        for r in 0..rows {
            let total: f64 = lsm[r * n..(r + 1) * n].iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gumbel_softmax_slices_sum_to_one(
        n in 2usize..12,
        rows in 1usize..5,
        temp in 0.05f64..4.0,
        seed in any::<u64>(),
    ) {
        let s = RngKey::new(seed).stream(Role::Init, 3, 0);
        let logits = Tensor::<f32>::new(
            &[rows, n],
            (0..rows * n).map(|i| (s.uniform(i as u64) * 8.0 - 4.0) as f32).collect(),
        ).unwrap();
        let noise = gumbel_noise_tensor::<f32>(RngKey::new(seed ^ 1), Role::GumbelPosterior, rows, 1, n);
        let mut tape: Tape<f32> = Tape::new();
        let v = tape.constant(logits);
        let soft = tape.gumbel_softmax(v, temp as f32, false, &noise).unwrap();
        for r in 0..rows {
            let total: f32 = tape.value(soft).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn padded_prompt_mask_is_consistent(
        t_len in 1usize..20,
        d in 1usize..6,
        c_frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let c = ((t_len as f64) * c_frac) as usize;
        let s = RngKey::new(seed).stream(Role::Init, 4, 0);
        let x = Tensor::<f32>::new(
            &[t_len, d],
            (0..t_len * d).map(|i| s.uniform(i as u64) as f32).collect(),
        ).unwrap();
        let prompt = PaddedPrompt::from_cut(&x, c).unwrap();
        let enc = prompt.encoded();
        prop_assert_eq!(enc.shape(), &[t_len, d + 1]);
        for t in 0..t_len {
            let row = enc.row(t);
            if t < c {
                prop_assert_eq!(row[d], 1.0);
                prop_assert_eq!(&row[..d], x.row(t));
            } else {
                prop_assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn hard_gumbel_frequencies_are_uniform_for_uniform_logits() {
    // 100k hard draws over N categories: each frequency within 3 standard
    // errors of 1/N.
    let n = 7usize;
    let draws = 100_000usize;
    let rows_per_batch = 500usize;
    let mut counts = vec![0usize; n];
    let key = RngKey::new(20_240_817);
    let logits = Tensor::<f32>::zeros(&[rows_per_batch, n]);
    for batch in 0..draws / rows_per_batch {
        let noise = gumbel_noise_tensor::<f32>(
            key.child(batch as u64),
            Role::GumbelPosterior,
            rows_per_batch,
            1,
            n,
        );
        let mut tape: Tape<f32> = Tape::new();
        let v = tape.constant(logits.clone());
        let hard = tape.gumbel_softmax(v, 1.0, true, &noise).unwrap();
        for r in 0..rows_per_batch {
            let row = tape.value(hard).row(r);
            let idx = row.iter().position(|&v| v == 1.0).unwrap();
            counts[idx] += 1;
        }
    }
    let p = 1.0 / n as f64;
    let se = (p * (1.0 - p) / draws as f64).sqrt();
    for (k, &c) in counts.iter().enumerate() {
        let freq = c as f64 / draws as f64;
        assert!(
            (freq - p).abs() <= 3.0 * se,
            "category {k}: freq {freq}, expected {p} +- {}",
            3.0 * se
        );
    }
}
