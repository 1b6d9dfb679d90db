//! Dataset ingestion and sequence views.
//!
//! Images become sequences of rows: MNIST gives 28 steps of 28 values,
//! CIFAR-10 gives 32 steps of 96 values (32 pixels x 3 interleaved
//! channels). Bytes scale to [0, 1] by 1/255 exactly. Labels are
//! discarded. Two synthetic generators exist: sequences drawn from a known
//! tiny model (for oracle tests) and seven-segment stroke digits shaped
//! like MNIST (a self-contained stand-in when the real files are absent).

use std::fs;
use std::path::{Path, PathBuf};

use vssm_core::model::{PaddedPrompt, Vssm};
use vssm_core::rng::{RngKey, Role};
use vssm_core::sampling::{sample_full, GenCounters, SampleCfg};
use vssm_core::tensor::Tensor;

use crate::{io_data, CmdError, CmdResult};

/// Where a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Mnist,
    Cifar,
    Synthetic,
}

/// Fixed-shape sequence collection; all items share [t_len, obs_dim] and
/// live in [0, 1] after normalization.
#[derive(Debug, Clone)]
pub struct SequenceDataset {
    pub items: Vec<Tensor<f32>>,
    pub t_len: usize,
    pub obs_dim: usize,
    pub provenance: Provenance,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn truncate(&mut self, max_items: usize) {
        if max_items > 0 && self.items.len() > max_items {
            self.items.truncate(max_items);
        }
    }
}

// ── MNIST IDX ───────────────────────────────────────────────────────

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// Parses an IDX image file (big-endian header) into row sequences.
pub fn load_mnist(path: &Path) -> CmdResult<SequenceDataset> {
    let bytes = fs::read(path).map_err(|e| io_data(path, e))?;
    if bytes.len() < 16 {
        return Err(CmdError::data(format!(
            "{}: truncated IDX header",
            path.display()
        )));
    }
    let be32 = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap());
    if be32(0) != IDX_IMAGE_MAGIC {
        return Err(CmdError::data(format!(
            "{}: bad IDX magic {:#010x} (expected {:#010x})",
            path.display(),
            be32(0),
            IDX_IMAGE_MAGIC
        )));
    }
    let count = be32(4) as usize;
    let rows = be32(8) as usize;
    let cols = be32(12) as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(CmdError::data(format!(
            "{}: expected {expected} bytes for {count} images of {rows}x{cols}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let data: Vec<f32> = bytes[start..start + rows * cols]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        items.push(Tensor::new(&[rows, cols], data).unwrap());
    }
    Ok(SequenceDataset {
        items,
        t_len: rows,
        obs_dim: cols,
        provenance: Provenance::Mnist,
    })
}

// ── CIFAR-10 binary ─────────────────────────────────────────────────

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 1024 pixels
const CIFAR_SIDE: usize = 32;

/// Parses CIFAR-10 binary batches into 32-step sequences of 96-wide rows
/// (interleaved RGB per pixel).
pub fn load_cifar(paths: &[PathBuf]) -> CmdResult<SequenceDataset> {
    if paths.is_empty() {
        return Err(CmdError::data("no CIFAR batch files given"));
    }
    let mut items = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(|e| io_data(path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(CmdError::data(format!(
                "{}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let planes = &record[1..];
            items.push(rows_from_planes(planes));
        }
    }
    Ok(SequenceDataset {
        items,
        t_len: CIFAR_SIDE,
        obs_dim: CIFAR_SIDE * 3,
        provenance: Provenance::Cifar,
    })
}

/// Channel-planar record (1024 R, 1024 G, 1024 B) to row-major interleaved
/// rows of width 96.
fn rows_from_planes(planes: &[u8]) -> Tensor<f32> {
    let mut data = vec![0.0f32; CIFAR_SIDE * CIFAR_SIDE * 3];
    for y in 0..CIFAR_SIDE {
        for x in 0..CIFAR_SIDE {
            for ch in 0..3 {
                data[(y * CIFAR_SIDE + x) * 3 + ch] =
                    planes[ch * 1024 + y * CIFAR_SIDE + x] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[CIFAR_SIDE, CIFAR_SIDE * 3], data).unwrap()
}

/// Inverse of [`rows_from_planes`]: used to verify the interleaving
/// round-trips.
pub fn planes_from_rows(rows: &Tensor<f32>) -> Vec<u8> {
    let mut planes = vec![0u8; CIFAR_SIDE * CIFAR_SIDE * 3];
    for y in 0..CIFAR_SIDE {
        for x in 0..CIFAR_SIDE {
            for ch in 0..3 {
                let v = rows.data()[(y * CIFAR_SIDE + x) * 3 + ch];
                planes[ch * 1024 + y * CIFAR_SIDE + x] = (v * 255.0).round() as u8;
            }
        }
    }
    planes
}

// ── Splits and cuts ─────────────────────────────────────────────────

/// Disjoint, exhaustive, seed-deterministic split; `fraction` of the items
/// go to the second half (the validation side).
pub fn split_train_valid(
    dataset: &SequenceDataset,
    fraction: f64,
    seed: u64,
) -> CmdResult<(SequenceDataset, SequenceDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CmdError::config("split fraction must be in (0, 1)"));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let stream = RngKey::new(seed).stream(Role::Shuffle, 0, 0);
    for i in (1..n).rev() {
        let j = stream.below(i as u64, (i + 1) as u64) as usize;
        order.swap(i, j);
    }
    let n_valid = ((n as f64) * fraction).round() as usize;
    let n_valid = n_valid.clamp(1, n.saturating_sub(1).max(1));
    let mut valid_items = Vec::with_capacity(n_valid);
    let mut train_items = Vec::with_capacity(n - n_valid);
    for (pos, &idx) in order.iter().enumerate() {
        if pos < n_valid {
            valid_items.push(dataset.items[idx].clone());
        } else {
            train_items.push(dataset.items[idx].clone());
        }
    }
    let mk = |items| SequenceDataset {
        items,
        t_len: dataset.t_len,
        obs_dim: dataset.obs_dim,
        provenance: dataset.provenance,
    };
    Ok((mk(train_items), mk(valid_items)))
}

/// Uniform random cut C over {0, 1, ..., T} and the padded prompt for it.
pub fn random_cut(x: &Tensor<f32>, key: RngKey) -> (usize, PaddedPrompt<f32>) {
    let t_len = x.shape()[0];
    let c = key.stream(Role::Cut, 0, 0).below(0, (t_len + 1) as u64) as usize;
    (c, PaddedPrompt::from_cut(x, c).unwrap())
}

/// Per-epoch shuffled index order, seed-deterministic.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let stream = RngKey::new(seed)
        .child(epoch as u64)
        .stream(Role::Shuffle, 1, 0);
    for i in (1..n).rev() {
        let j = stream.below(i as u64, (i + 1) as u64) as usize;
        order.swap(i, j);
    }
    order
}

// ── Synthetic data ──────────────────────────────────────────────────

/// Sequences sampled unconditionally from a known model; the ground truth
/// for enumeration-based tests.
pub fn synthetic_from_model(model: &Vssm<f32>, count: usize, seed: u64) -> SequenceDataset {
    let root = RngKey::new(seed);
    let mut counters = GenCounters::default();
    let items: Vec<Tensor<f32>> = (0..count)
        .map(|i| {
            let prompt = PaddedPrompt::empty(model.hyper.t_len, model.hyper.obs_dim);
            sample_full(
                model,
                &prompt,
                root.child(i as u64),
                SampleCfg::default(),
                &mut counters,
            )
            .expect("sampling from a valid model")
        })
        .collect();
    SequenceDataset {
        items,
        t_len: model.hyper.t_len,
        obs_dim: model.hyper.obs_dim,
        provenance: Provenance::Synthetic,
    }
}

/// Seven-segment digit renderings with per-item jitter, shaped like MNIST
/// rows (28 x 28, values in [0, 1]).
pub fn synthetic_digits(count: usize, seed: u64) -> SequenceDataset {
    const SIDE: usize = 28;
    // Segment layout on a 28x28 canvas: (x0, y0, x1, y1) line endpoints.
    // Segments: 0 top, 1 top-right, 2 bottom-right, 3 bottom, 4 bottom-left,
    // 5 top-left, 6 middle.
    const SEGMENTS: [(f32, f32, f32, f32); 7] = [
        (8.0, 5.0, 20.0, 5.0),
        (20.0, 5.0, 20.0, 14.0),
        (20.0, 14.0, 20.0, 23.0),
        (8.0, 23.0, 20.0, 23.0),
        (8.0, 14.0, 8.0, 23.0),
        (8.0, 5.0, 8.0, 14.0),
        (8.0, 14.0, 20.0, 14.0),
    ];
    const DIGIT_SEGMENTS: [&[usize]; 10] = [
        &[0, 1, 2, 3, 4, 5],
        &[1, 2],
        &[0, 1, 6, 4, 3],
        &[0, 1, 6, 2, 3],
        &[5, 6, 1, 2],
        &[0, 5, 6, 2, 3],
        &[0, 5, 4, 3, 2, 6],
        &[0, 1, 2],
        &[0, 1, 2, 3, 4, 5, 6],
        &[6, 5, 0, 1, 2, 3],
    ];

    let root = RngKey::new(seed);
    let items: Vec<Tensor<f32>> = (0..count)
        .map(|i| {
            let key = root.child(i as u64);
            let s = key.stream(Role::Init, 0, 0);
            let digit = s.below(0, 10) as usize;
            // Continuous per-item factors: offset, scale, shear, stroke
            // width, intensity, and per-segment endpoint jitter, so the
            // set is a continuum rather than ten archetypes.
            let dx = ((s.uniform(1) - 0.5) * 6.0) as f32;
            let dy = ((s.uniform(2) - 0.5) * 4.0) as f32;
            let scale = (0.72 + 0.45 * s.uniform(3)) as f32;
            let intensity = (0.55 + 0.45 * s.uniform(4)) as f32;
            let shear = ((s.uniform(5) - 0.5) * 0.5) as f32;
            let width = (0.9 + 1.0 * s.uniform(6)) as f32;
            let aspect = (0.85 + 0.3 * s.uniform(7)) as f32;
            let mut canvas = vec![0.0f32; SIDE * SIDE];
            for (si, &seg) in DIGIT_SEGMENTS[digit].iter().enumerate() {
                let (x0, y0, x1, y1) = SEGMENTS[seg];
                let jitter = key.stream(Role::Init, 1, si as u32);
                let map = |x: f32, y: f32, j0: u64| {
                    let jx = ((jitter.uniform(j0) - 0.5) * 2.4) as f32;
                    let jy = ((jitter.uniform(j0 + 1) - 0.5) * 2.4) as f32;
                    let ys = (y - 14.0) * scale * aspect;
                    let xs = (x - 14.0) * scale + shear * ys;
                    (xs + 14.0 + dx + jx, ys + 14.0 + dy + jy)
                };
                let (ax, ay) = map(x0, y0, 0);
                let (bx, by) = map(x1, y1, 2);
                draw_line(&mut canvas, SIDE, ax, ay, bx, by, intensity, width);
            }
            Tensor::new(&[SIDE, SIDE], canvas).unwrap()
        })
        .collect();
    SequenceDataset {
        items,
        t_len: SIDE,
        obs_dim: SIDE,
        provenance: Provenance::Synthetic,
    }
}

/// Anti-aliased thick line segment, additive up to saturation.
#[allow(clippy::too_many_arguments)]
fn draw_line(
    canvas: &mut [f32],
    side: usize,
    x0: f32,
    y0: f32,
    x1: f32,
    y1: f32,
    value: f32,
    half_width: f32,
) {
    let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt().max(1e-6);
    let lo_x = (x0.min(x1) - 2.0).floor().max(0.0) as usize;
    let hi_x = ((x0.max(x1) + 2.0).ceil() as usize).min(side - 1);
    let lo_y = (y0.min(y1) - 2.0).floor().max(0.0) as usize;
    let hi_y = ((y0.max(y1) + 2.0).ceil() as usize).min(side - 1);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let (px, py) = (x as f32, y as f32);
            // Distance from pixel to the segment.
            let t = (((px - x0) * (x1 - x0) + (py - y0) * (y1 - y0)) / (len * len)).clamp(0.0, 1.0);
            let (cx, cy) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            if d < half_width {
                let a = value * (1.0 - (d / half_width).powi(2));
                let cell = &mut canvas[y * side + x];
                *cell = (*cell + a).min(1.0);
            }
        }
    }
}

// ── Dataset resolution ──────────────────────────────────────────────

/// Interprets the --dataset argument: "digits[:count]" for the synthetic
/// digit set, an IDX file path for MNIST, or a directory of CIFAR-10
/// .bin batches.
pub fn resolve_dataset(spec: &str, seed: u64) -> CmdResult<SequenceDataset> {
    if let Some(rest) = spec.strip_prefix("digits") {
        let count = match rest.strip_prefix(':') {
            Some(n) => n
                .parse::<usize>()
                .map_err(|_| CmdError::config(format!("bad digit count in '{spec}'")))?,
            None => 10_000,
        };
        return Ok(synthetic_digits(count, seed.wrapping_add(0x5d1)));
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CmdError::data(format!(
            "dataset path does not exist: {}",
            path.display()
        )));
    }
    if path.is_dir() {
        let mut batches: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| io_data(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        batches.sort();
        return load_cifar(&batches);
    }
    load_mnist(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_bytes(count: usize, rows: usize, cols: usize, pixel: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(count as u32).to_be_bytes());
        bytes.extend_from_slice(&(rows as u32).to_be_bytes());
        bytes.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..count * rows * cols {
            bytes.push(pixel(i));
        }
        bytes
    }

    #[test]
    fn mnist_loader_validates_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx");
        std::fs::write(&path, idx_bytes(2, 28, 28, |i| if i == 0 { 255 } else { 0 })).unwrap();
        let ds = load_mnist(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!((ds.t_len, ds.obs_dim), (28, 28));
        assert_eq!(ds.items[0].data()[0], 1.0);
        assert!(ds.items[0].data()[1..].iter().all(|&v| v == 0.0));
        assert!(ds.items[1].data().iter().all(|&v| v == 0.0));

        // Bad magic.
        let bad = dir.path().join("bad.idx");
        let mut bytes = idx_bytes(1, 28, 28, |_| 0);
        bytes[3] = 0x01;
        std::fs::write(&bad, bytes).unwrap();
        assert!(matches!(load_mnist(&bad), Err(CmdError::Data(_))));

        // Truncated payload.
        let trunc = dir.path().join("trunc.idx");
        let bytes = idx_bytes(2, 28, 28, |_| 0);
        std::fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_mnist(&trunc), Err(CmdError::Data(_))));
    }

    #[test]
    fn cifar_loader_round_trips_plane_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut file = std::fs::File::create(&path).unwrap();
        let mut record = vec![7u8]; // label
        for i in 0..3072 {
            record.push((i % 251) as u8);
        }
        file.write_all(&record).unwrap();
        drop(file);

        let ds = load_cifar(&[path.clone()]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!((ds.t_len, ds.obs_dim), (32, 96));
        assert_eq!(planes_from_rows(&ds.items[0]), record[1..].to_vec());

        // Truncated record.
        std::fs::write(&path, &record[..3000]).unwrap();
        assert!(matches!(load_cifar(&[path]), Err(CmdError::Data(_))));
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let ds = synthetic_digits(100, 3);
        let (a1, b1) = split_train_valid(&ds, 0.1, 5).unwrap();
        let (a2, b2) = split_train_valid(&ds, 0.1, 5).unwrap();
        assert_eq!(a1.len(), 90);
        assert_eq!(b1.len(), 10);
        for (x, y) in a1.items.iter().zip(&a2.items) {
            assert_eq!(x.data(), y.data());
        }
        for (x, y) in b1.items.iter().zip(&b2.items) {
            assert_eq!(x.data(), y.data());
        }
        // Union as multiset: match on a content hash.
        let mut all: Vec<Vec<u8>> = ds
            .items
            .iter()
            .map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let mut joined: Vec<Vec<u8>> = a1
            .items
            .iter()
            .chain(&b1.items)
            .map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        all.sort();
        joined.sort();
        assert_eq!(all, joined);

        assert!(split_train_valid(&ds, 0.0, 5).is_err());
        assert!(split_train_valid(&ds, 1.0, 5).is_err());
    }

    #[test]
    fn random_cut_is_uniform_over_inclusive_range() {
        let x = Tensor::zeros(&[28, 4]);
        let draws = 100_000;
        let mut counts = vec![0usize; 29];
        let root = RngKey::new(11);
        for i in 0..draws {
            let (c, prompt) = random_cut(&x, root.child(i));
            counts[c] += 1;
            assert_eq!(prompt.c, c);
        }
        let p = 1.0 / 29.0;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for (c, &n) in counts.iter().enumerate() {
            let freq = n as f64 / draws as f64;
            assert!(
                (freq - p).abs() <= 3.0 * se,
                "cut {c}: freq {freq} expected {p}"
            );
        }
    }

    #[test]
    fn cut_boundaries_produce_expected_prompts() {
        let x = Tensor::new(&[4, 2], vec![1.0f32; 8]).unwrap();
        let p0 = PaddedPrompt::from_cut(&x, 0).unwrap();
        assert_eq!(p0.c, 0);
        assert!(p0.encoded().data().iter().all(|&v| v == 0.0));
        let pt = PaddedPrompt::from_cut(&x, 4).unwrap();
        assert_eq!(pt.c, 4);
        assert!(pt.encoded().data().chunks(3).all(|row| row[2] == 1.0));
    }

    #[test]
    fn digits_are_shaped_and_bounded() {
        let ds = synthetic_digits(32, 9);
        assert_eq!((ds.t_len, ds.obs_dim), (28, 28));
        for item in &ds.items {
            assert!(item.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Some ink on every canvas.
        for item in &ds.items {
            assert!(item.data().iter().any(|&v| v > 0.3));
        }
        // Deterministic.
        let ds2 = synthetic_digits(32, 9);
        assert_eq!(ds.items[0].data(), ds2.items[0].data());
    }
}
