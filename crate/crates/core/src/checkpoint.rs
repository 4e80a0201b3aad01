//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AFA1"  u32 version  u32 section_count
//! section: [u8; 4] tag  u32 n_dims  u64 × n_dims  u32 n_tensors
//! tensor:  u32 rank  u64 × rank  f64 × numel
//! ```
//!
//! Target sections carry `vocab, d_model, heads, d_ff, positional, classes`;
//! discriminator sections the same minus `classes`. Tensors follow the
//! parameter declaration order of the model.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::discriminator::Discriminator;
use crate::error::{AfaError, Result};
use crate::nn::{EncoderDims, ParamSet};
use crate::numerics::Tensor;
use crate::target::{TargetDims, TargetModel};

const MAGIC: &[u8; 4] = b"AFA1";
const VERSION: u32 = 1;
const TARGET_TAG: &[u8; 4] = b"TGT\0";
const DISC_TAG: &[u8; 4] = b"DSC\0";

fn encoder_dims(d: &EncoderDims) -> Vec<u64> {
    vec![
        d.vocab as u64,
        d.d_model as u64,
        d.heads as u64,
        d.d_ff as u64,
        d.positional as u64,
    ]
}

fn write_section(out: &mut Vec<u8>, tag: &[u8; 4], dims: &[u64], params: &ParamSet) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params.values() {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes whichever models are given.
pub fn to_bytes(target: Option<&TargetModel>, disc: Option<&Discriminator>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = target.is_some() as u32 + disc.is_some() as u32;
    out.extend_from_slice(&count.to_le_bytes());
    if let Some(t) = target {
        let mut dims = encoder_dims(&t.dims.encoder);
        dims.push(t.dims.num_classes as u64);
        write_section(&mut out, TARGET_TAG, &dims, &t.params);
    }
    if let Some(d) = disc {
        write_section(&mut out, DISC_TAG, &encoder_dims(&d.dims), &d.params);
    }
    out
}

pub fn save(path: &Path, target: Option<&TargetModel>, disc: Option<&Discriminator>) -> Result<()> {
    fs::write(path, to_bytes(target, disc))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| AfaError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| AfaError::Checkpoint("extent overflows usize".into()))
    }
}

struct Section {
    tag: [u8; 4],
    dims: Vec<u64>,
    tensors: Vec<Tensor>,
}

fn parse(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(AfaError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(AfaError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut sections = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let n_dims = r.u32()?;
        let dims = (0..n_dims).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n_tensors = r.u32()?;
        let mut tensors = Vec::with_capacity(n_tensors as usize);
        for _ in 0..n_tensors {
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| AfaError::Checkpoint("tensor size overflows".into()))?;
            let raw = r.take(numel)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        sections.push(Section { tag, dims, tensors });
    }
    if r.pos != bytes.len() {
        return Err(AfaError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(sections)
}

fn dims_from(section: &Section, expected: usize) -> Result<EncoderDims> {
    if section.dims.len() != expected {
        return Err(AfaError::Checkpoint(format!(
            "expected {expected} dims, found {}",
            section.dims.len()
        )));
    }
    let d = &section.dims;
    Ok(EncoderDims {
        vocab: d[0] as usize,
        d_model: d[1] as usize,
        heads: d[2] as usize,
        d_ff: d[3] as usize,
        positional: d[4] != 0,
    })
}

/// Overwrites freshly initialised parameters, checking every shape.
fn fill(params: &mut ParamSet, tensors: Vec<Tensor>) -> Result<()> {
    if params.len() != tensors.len() {
        return Err(AfaError::Checkpoint(format!(
            "expected {} tensors, found {}",
            params.len(),
            tensors.len()
        )));
    }
    for ((name, p), t) in params.names.iter().zip(params.params.iter_mut()).zip(tensors) {
        if p.value.shape() != t.shape() {
            return Err(AfaError::Checkpoint(format!(
                "{name}: expected shape {:?}, found {:?}",
                p.value.shape(),
                t.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

fn find(sections: Vec<Section>, tag: &[u8; 4]) -> Result<Section> {
    sections
        .into_iter()
        .find(|s| &s.tag == tag)
        .ok_or_else(|| AfaError::Checkpoint(format!("no {} section", String::from_utf8_lossy(&tag[..3]))))
}

pub fn target_from_bytes(bytes: &[u8]) -> Result<TargetModel> {
    let section = find(parse(bytes)?, TARGET_TAG)?;
    let encoder = dims_from(&section, 6)?;
    let dims = TargetDims {
        encoder,
        num_classes: section.dims[5] as usize,
    };
    let mut model = TargetModel::new(dims, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill(&mut model.params, section.tensors)?;
    Ok(model)
}

pub fn discriminator_from_bytes(bytes: &[u8]) -> Result<Discriminator> {
    let section = find(parse(bytes)?, DISC_TAG)?;
    let dims = dims_from(&section, 5)?;
    let mut model = Discriminator::new(dims, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill(&mut model.params, section.tensors)?;
    Ok(model)
}

pub fn load_target(path: &Path) -> Result<TargetModel> {
    target_from_bytes(&fs::read(path)?)
}

pub fn load_discriminator(path: &Path) -> Result<Discriminator> {
    discriminator_from_bytes(&fs::read(path)?)
}
