use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{AcktError, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "ACKT1";

/// Named trainable tensors. Iteration order is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles for the parameters of a [`ParamStore`].
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics when `name` was never bound; parameter names are fixed by the
    /// model code.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects gradients for every bound trainable parameter.
    pub fn gradients(&self, grads: &Gradients, trainable: impl Fn(&str) -> bool) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(name, _)| trainable(name))
            .map(|(name, v)| (name.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| AcktError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copies every tensor from `other`, overwriting names already present.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Places every tensor on `tape`; names accepted by `trainable` become
    /// gradient-tracked parameters, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.values_mut().for_each(Tensor::round_to_f32);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Header line, then per tensor a `name ndim d1 .. dn` line followed by
    /// little-endian `f32` values in row-major order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(AcktError::Checkpoint(format!("invalid tensor name `{name}`")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(w, "{name} {} {}", t.rank(), dims.join(" "))?;
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let bad = |msg: String| AcktError::Checkpoint(msg);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line != format!("{MAGIC}\n") {
            return Err(bad(format!("bad header {:?}", line.trim_end())));
        }
        let mut tensors = BTreeMap::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                break;
            }
            let mut fields = line.trim_end_matches('\n').split(' ');
            let name = fields.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("missing tensor name".into()))?;
            let ndim: usize = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("tensor `{name}`: bad ndim")))?;
            let shape: Vec<usize> = fields
                .map(|s| s.parse().map_err(|_| bad(format!("tensor `{name}`: bad dim {s:?}"))))
                .collect::<Result<_>>()?;
            if shape.len() != ndim {
                return Err(bad(format!("tensor `{name}`: expected {ndim} dims, got {}", shape.len())));
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("tensor `{name}`: truncated data")))?;
            let data = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            tensors.insert(name.to_string(), t);
        }
        Ok(ParamStore { tensors })
    }
}

/// Gaussian initialisation scaled by `1/sqrt(fan_in)`.
pub fn init_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    init_normal(rng, &[fan_in, fan_out], std)
}

pub fn init_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_layout_is_exact() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::vector(vec![1.0, -2.5]));
        store.insert("a", Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let mut want = b"ACKT1\na 2 1 1\n".to_vec();
        want.extend_from_slice(&0.5f32.to_le_bytes());
        want.extend_from_slice(b"b 1 2\n");
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
        let back = ParamStore::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn rejects_corrupt_checkpoints() {
        assert!(ParamStore::read_from(&mut &b"ACKT2\n"[..]).is_err());
        assert!(ParamStore::read_from(&mut &b"ACKT1\nw 1 4\n\0\0"[..]).is_err());
        assert!(ParamStore::read_from(&mut &b"ACKT1\nw 2 4\n"[..]).is_err());
    }

    #[test]
    fn round_trip_after_f32_rounding_is_exact() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.1, 1.0 / 3.0, -7.123456789]));
        store.round_to_f32();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        assert_eq!(ParamStore::read_from(&mut &buf[..]).unwrap(), store);
    }
}
