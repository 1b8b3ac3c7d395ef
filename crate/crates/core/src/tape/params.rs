use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered, uniquely named model parameters. The order is the FedAvg
/// alignment order and the checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

/// Tape handles for a bound [`ParamSet`], in parameter order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new(named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &named {
            if !seen.insert(name.as_str()) {
                return Err(Error::ParamMismatch(format!("duplicate name `{name}`")));
            }
        }
        Ok(Self {
            params: named
                .into_iter()
                .map(|(name, value)| Param {
                    name,
                    value,
                    grad: None,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// True when names and shapes agree entry by entry.
    pub fn same_schema(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Registers every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    /// Adds the tape's leaf gradients into each parameter's `grad`.
    /// Parameters the loss never reached receive zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &BoundParams) -> Result<()> {
        if bound.vars.len() != self.params.len() {
            return Err(Error::ParamMismatch(format!(
                "{} bound vars for {} params",
                bound.vars.len(),
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            let slot = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(g) = tape.grad(v) {
                slot.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copy without gradients, suitable for sending to another thread.
    pub fn frozen(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    grad: None,
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn flatten_grads(&self) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            let g = p.grad.as_ref().ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            out.extend_from_slice(g.data());
        }
        Ok(out)
    }

    /// Replaces every gradient with the matching slice of `flat`.
    pub fn set_grads(&mut self, flat: &[T]) -> Result<()> {
        let shaped = self.unflatten(flat)?;
        for (p, g) in self.params.iter_mut().zip(shaped.params) {
            p.grad = Some(g.value);
        }
        Ok(())
    }

    /// Inverse of [`ParamSet::flatten`] against this set's schema.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::ParamMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let mut params = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let n = p.value.numel();
            params.push(Param {
                name: p.name.clone(),
                value: Tensor::new(p.value.shape().to_vec(), flat[offset..offset + n].to_vec())?,
                grad: None,
            });
            offset += n;
        }
        Ok(Self { params })
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }

    /// FNV-1a over names, shapes and little-endian f32 values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&(v.f64() as f32).to_le_bytes());
            }
        }
        h
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Serializes parameters as a manifest followed by a float32 payload.
///
/// Layout, all integers little-endian:
///
/// ```text
/// magic "FDCK" | version u16 | count u32
/// count x { name_len u16 | name utf-8 | dtype u8 (0 = f32) | ndim u8
///           | dims u32 x ndim | byte_offset u64 }
/// payload: concatenated f32 values, offsets relative to payload start
/// ```
pub fn encode_checkpoint<T: Real>(params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * p.value.numel() as u64;
    }
    for p in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<ParamSet<T>> {
    let bad = |detail: &str| Error::format("checkpoint", "<bytes>", detail);
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let version = cur.u16().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = cur.u32().ok_or_else(|| bad("truncated header"))?;
    let mut manifest = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u16().ok_or_else(|| bad("truncated manifest"))? as usize;
        let name = std::str::from_utf8(cur.take(name_len).ok_or_else(|| bad("truncated name"))?)
            .map_err(|_| bad("name is not utf-8"))?
            .to_string();
        let dtype = cur.u8().ok_or_else(|| bad("truncated manifest"))?;
        if dtype != DTYPE_F32 {
            return Err(bad(&format!("unsupported dtype {dtype}")));
        }
        let ndim = cur.u8().ok_or_else(|| bad("truncated manifest"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32().ok_or_else(|| bad("truncated dims"))? as usize);
        }
        let offset = cur.u64().ok_or_else(|| bad("truncated offset"))? as usize;
        manifest.push((name, shape, offset));
    }
    let payload = &bytes[cur.pos..];
    let mut named = Vec::with_capacity(manifest.len());
    for (name, shape, offset) in manifest {
        let n: usize = shape.iter().product();
        let raw = payload
            .get(offset..offset + 4 * n)
            .ok_or_else(|| bad(&format!("payload too short for `{name}`")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    ParamSet::new(named)
}

pub fn save_checkpoint<T: Real>(params: &ParamSet<T>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ParamSet<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { what, detail, .. } => Error::format(what, path, detail),
        other => other,
    })
}
