//! Versioned binary checkpoint codec for models.
//!
//! Layout: magic "VSSM", format version, a model-kind byte, the
//! hyperparameter block, a table of named parameter tensors (shape plus
//! little-endian f32 data), and a trailing CRC-32 over everything before
//! it. Decoding verifies the checksum, then rebuilds the model and fills
//! every parameter by name, rejecting missing, extra or misshapen entries.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Vssm, VssmHyper};
use crate::rng::RngKey;
use crate::sampling::SsmBaseline;
use crate::tensor::Tensor;
use crate::wire::{self, Reader};

const MAGIC: &[u8; 4] = b"VSSM";
const VERSION: u32 = 1;

const KIND_VSSM: u8 = 0;
const KIND_BASELINE: u8 = 1;

/// What a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Vssm,
    Baseline,
}

/// Kind of a serialized checkpoint without decoding it fully.
pub fn peek_kind(bytes: &[u8]) -> Result<CheckpointKind> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    if r.u32()? != VERSION {
        return Err(Error::format("unsupported checkpoint version"));
    }
    match r.take(1)?[0] {
        KIND_VSSM => Ok(CheckpointKind::Vssm),
        KIND_BASELINE => Ok(CheckpointKind::Baseline),
        _ => Err(Error::format("unknown checkpoint kind")),
    }
}

fn put_tensor_table(out: &mut Vec<u8>, tensors: &[(String, Tensor<f32>)]) {
    wire::put_u32(out, tensors.len() as u32);
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        wire::put_u32(out, name_bytes.len() as u32);
        out.extend_from_slice(name_bytes);
        wire::put_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            wire::put_u32(out, d as u32);
        }
        wire::put_f32_slice(out, t.data());
    }
}

fn read_tensor_table(r: &mut Reader) -> Result<BTreeMap<String, Tensor<f32>>> {
    let count = r.u32()? as usize;
    if count > 1 << 20 {
        return Err(Error::format("implausible tensor count"));
    }
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len > 4096 {
            return Err(Error::format("implausible name length"));
        }
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("parameter name is not utf-8"))?
            .into();
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::format("implausible rank"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(Error::format("implausible tensor size"));
        }
        let data = r.f32_vec(numel)?;
        if map.insert(name, Tensor::new(&shape, data)?).is_some() {
            return Err(Error::format("duplicate parameter name"));
        }
    }
    Ok(map)
}

fn finish(mut out: Vec<u8>) -> Vec<u8> {
    let crc = wire::crc32(&out);
    wire::put_u32(&mut out, crc);
    out
}

fn open_checked(bytes: &[u8], expect_kind: u8) -> Result<Reader<'_>> {
    if bytes.len() < 4 {
        return Err(Error::format("truncated checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if wire::crc32(body) != stored {
        return Err(Error::format("checkpoint checksum mismatch"));
    }
    let mut r = Reader::new(body);
    if r.take(4)? != MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    if r.u32()? != VERSION {
        return Err(Error::format("unsupported checkpoint version"));
    }
    if r.take(1)?[0] != expect_kind {
        return Err(Error::format("checkpoint holds a different model kind"));
    }
    Ok(r)
}

fn fill_params(
    mut table: BTreeMap<String, Tensor<f32>>,
    visit: impl FnOnce(&mut dyn FnMut(String, &mut Tensor<f32>) -> Result<()>) -> Result<()>,
) -> Result<()> {
    visit(&mut |name: String, param: &mut Tensor<f32>| {
        let stored = table
            .remove(&name)
            .ok_or_else(|| Error::format("checkpoint is missing a parameter"))?;
        if stored.shape() != param.shape() {
            return Err(Error::format("checkpoint parameter shape mismatch"));
        }
        *param = stored;
        Ok(())
    })?;
    if !table.is_empty() {
        return Err(Error::format("checkpoint has unknown parameters"));
    }
    Ok(())
}

// ── VSSM ────────────────────────────────────────────────────────────

pub fn encode_vssm(model: &Vssm<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    wire::put_u32(&mut out, VERSION);
    out.push(KIND_VSSM);
    let h = &model.hyper;
    for v in [
        h.t_len, h.obs_dim, h.z_comp, h.n_cat, h.width, h.state, h.hidden, h.layers,
    ] {
        wire::put_u32(&mut out, v as u32);
    }
    wire::put_f64(&mut out, h.sigma);
    wire::put_f64(&mut out, h.tau);

    let mut tensors = Vec::new();
    model.visit_params(&mut |name, t| tensors.push((name, t.clone())));
    put_tensor_table(&mut out, &tensors);
    finish(out)
}

pub fn decode_vssm(bytes: &[u8]) -> Result<Vssm<f32>> {
    let mut r = open_checked(bytes, KIND_VSSM)?;
    let t_len = r.u32()? as usize;
    let obs_dim = r.u32()? as usize;
    let z_comp = r.u32()? as usize;
    let n_cat = r.u32()? as usize;
    let width = r.u32()? as usize;
    let state = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let layers = r.u32()? as usize;
    let sigma = r.f64()?;
    let tau = r.f64()?;
    let hyper = VssmHyper {
        t_len,
        obs_dim,
        z_comp,
        n_cat,
        sigma,
        tau,
        width,
        state,
        hidden,
        layers,
    };
    hyper.validate().map_err(|_| Error::format("invalid hyperparameters in checkpoint"))?;
    let table = read_tensor_table(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::format("trailing bytes in checkpoint"));
    }
    let mut model = Vssm::init(hyper, RngKey::new(0)).map_err(|e| Error::format(alloc::format!("{e}")))?;
    let mut result = Ok(());
    fill_params(table, |f| {
        model.visit_params_mut(&mut |n, t| {
            if result.is_ok() {
                result = f(n, t);
            }
        });
        result.clone()
    })?;
    Ok(model)
}

// ── Baseline ────────────────────────────────────────────────────────

pub fn encode_baseline(baseline: &SsmBaseline<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    wire::put_u32(&mut out, VERSION);
    out.push(KIND_BASELINE);
    let c = &baseline.stack.config;
    for v in [
        baseline.t_len,
        c.input_dim,
        c.width,
        c.state,
        c.hidden,
        c.layers,
    ] {
        wire::put_u32(&mut out, v as u32);
    }
    wire::put_f64(&mut out, baseline.sigma);

    let mut tensors = Vec::new();
    baseline.visit_params(&mut |name, t| tensors.push((name, t.clone())));
    put_tensor_table(&mut out, &tensors);
    finish(out)
}

pub fn decode_baseline(bytes: &[u8]) -> Result<SsmBaseline<f32>> {
    let mut r = open_checked(bytes, KIND_BASELINE)?;
    let t_len = r.u32()? as usize;
    let obs_dim = r.u32()? as usize;
    let width = r.u32()? as usize;
    let state = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let layers = r.u32()? as usize;
    let sigma = r.f64()?;
    let table = read_tensor_table(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::format("trailing bytes in checkpoint"));
    }
    let mut baseline = SsmBaseline::init(
        t_len,
        obs_dim,
        sigma,
        width,
        state,
        hidden,
        layers,
        RngKey::new(0),
    );
    let mut result = Ok(());
    fill_params(table, |f| {
        baseline.visit_params_mut(&mut |n, t| {
            if result.is_ok() {
                result = f(n, t);
            }
        });
        result.clone()
    })?;
    Ok(baseline)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Vssm<f32> {
        Vssm::init(
            VssmHyper {
                t_len: 4,
                obs_dim: 3,
                z_comp: 2,
                n_cat: 3,
                sigma: 0.1,
                tau: 1.0,
                width: 4,
                state: 2,
                hidden: 5,
                layers: 2,
            },
            RngKey::new(42),
        )
        .unwrap()
    }

    #[test]
    fn vssm_round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode_vssm(&m);
        assert_eq!(peek_kind(&bytes).unwrap(), CheckpointKind::Vssm);
        let decoded = decode_vssm(&bytes).unwrap();
        assert_eq!(m, decoded);
        // Deterministic encoding.
        assert_eq!(bytes, encode_vssm(&decoded));
    }

    #[test]
    fn baseline_round_trip_is_bit_exact() {
        let b: SsmBaseline<f32> = SsmBaseline::init(6, 3, 0.1, 4, 2, 5, 2, RngKey::new(7));
        let bytes = encode_baseline(&b);
        assert_eq!(peek_kind(&bytes).unwrap(), CheckpointKind::Baseline);
        assert_eq!(b, decode_baseline(&bytes).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_vssm(&model());
        // Flip one payload byte: checksum mismatch.
        let mut bad = bytes.clone();
        bad[100] ^= 0x40;
        assert!(matches!(decode_vssm(&bad), Err(Error::Format(_))));
        // Truncation.
        assert!(decode_vssm(&bytes[..bytes.len() - 9]).is_err());
        // Kind confusion.
        assert!(decode_baseline(&bytes).is_err());
    }
}
