//! Single-file container of named `f32` tensors.
//!
//! Layout (little endian): magic `LFTENSOR`, `u32` version, `u32` count, then
//! per tensor `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LFTENSOR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(AutodiffError::Format(format!("tensor `{}` shape/data disagree", t.name)));
        }
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AutodiffError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(AutodiffError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| AutodiffError::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

const M_SUFFIX: &str = "@adam.m";
const V_SUFFIX: &str = "@adam.v";
const STEP_SUFFIX: &str = "@adam.step";

impl ParamStore<f32> {
    /// Parameters plus Adam state as named tensors.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::with_capacity(self.len() * 4);
        for (_, p) in self.iter() {
            let shape = p.value().shape().to_vec();
            out.push(NamedTensor::new(p.name(), shape.clone(), p.value().data().to_vec()));
            out.push(NamedTensor::new(format!("{}{M_SUFFIX}", p.name()), shape.clone(), p.m.clone()));
            out.push(NamedTensor::new(format!("{}{V_SUFFIX}", p.name()), shape, p.v.clone()));
            out.push(NamedTensor::new(format!("{}{STEP_SUFFIX}", p.name()), vec![1], vec![p.step as f32]));
        }
        out
    }

    /// Overwrites values (and optimizer state when present) from `tensors`.
    /// Every parameter must be present with a matching shape; unrelated
    /// tensors are ignored.
    pub fn load_named_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let ids: Vec<_> = self.ids().collect();
        for id in ids {
            let name = self.param(id).name().to_string();
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| AutodiffError::Format(format!("checkpoint lacks `{name}`")))?;
            if t.shape != self.value(id).shape() {
                return Err(AutodiffError::Format(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape,
                    self.value(id).shape()
                )));
            }
            *self.value_mut(id) = Tensor::new(t.shape.clone(), t.data.clone())?;
            let p = self.param_mut(id);
            if let Some(m) = lookup.get(format!("{name}{M_SUFFIX}").as_str()) {
                p.m = m.data.clone();
            }
            if let Some(v) = lookup.get(format!("{name}{V_SUFFIX}").as_str()) {
                p.v = v.data.clone();
            }
            if let Some(s) = lookup.get(format!("{name}{STEP_SUFFIX}").as_str()) {
                p.step = s.data.first().copied().unwrap_or(0.0) as u64;
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }
}

pub fn save_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_file(path: &Path) -> Result<Vec<NamedTensor>> {
    let f = std::fs::File::open(path)?;
    read_tensors(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip_keeps_values_and_moments() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(), 0).unwrap();
        s.grad_mut(a).copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        crate::adam_step(&mut s, &[crate::AdamConfig::default()]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &s.to_named_tensors()).unwrap();

        let mut t = ParamStore::<f32>::new();
        t.add("a", Tensor::zeros(vec![2, 2]), 0).unwrap();
        t.load_named_tensors(&read_tensors(&buf[..]).unwrap()).unwrap();
        assert_eq!(t.value(a), s.value(a));
        assert_eq!(t.param(a).first_moment(), s.param(a).first_moment());
        assert_eq!(t.param(a).step_count(), 1);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_magic() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(vec![3]), 0).unwrap();
        let other = vec![NamedTensor::new("a", vec![2], vec![0.0, 0.0])];
        assert!(s.load_named_tensors(&other).is_err());
        assert!(read_tensors(&b"NOTMAGIC\x01\0\0\0"[..]).is_err());
    }
}
