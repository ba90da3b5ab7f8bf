//! Named trainable parameters and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "VTAD" | version: u32 | count: u32
//! per parameter: name_len: u32 | name: UTF-8 | rank: u32 | dims: u64 × rank | payload: f64 × numel
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VTAD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Normal with the given std, resampled outside ±2 std.
    TruncatedNormal { std: f64 },
    Zeros,
    /// `scale·I` for square matrices, `scale` everywhere for vectors.
    IdentityScaled(f64),
    Constant(f64),
}

impl InitScheme {
    pub fn sample(&self, shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        let data = match *self {
            InitScheme::TruncatedNormal { std } => (0..numel)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
            InitScheme::Zeros => vec![0.0; numel],
            InitScheme::Constant(c) => vec![c; numel],
            InitScheme::IdentityScaled(s) => match shape {
                [_] => vec![s; numel],
                [r, c] if r == c => (0..numel).map(|i| if i / c == i % c { s } else { 0.0 }).collect(),
                _ => {
                    return Err(TensorError::Config {
                        op: "init",
                        msg: format!("identity_scaled needs a vector or square matrix, got {shape:?}"),
                    })
                }
            },
        };
        Tensor::new(shape, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub init: InitScheme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: InitScheme, rng: &mut impl Rng) -> Result<ParamId> {
        let tensor = init.sample(shape, rng)?;
        self.insert(Parameter {
            name: name.to_string(),
            tensor,
            init,
        })
    }

    pub fn insert(&mut self, p: Parameter) -> Result<ParamId> {
        if self.by_name.contains_key(&p.name) {
            return Err(TensorError::Config {
                op: "param",
                msg: format!("duplicate parameter name {}", p.name),
            });
        }
        let id = self.params.len();
        self.by_name.insert(p.name.clone(), id);
        self.params.push(p);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Scalar parameter count over names starting with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Records every parameter on `graph` as a trainable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        BoundParams {
            vars: self.params.iter().map(|p| graph.leaf(p.tensor.clone())).collect(),
        }
    }

    /// Records every parameter as a constant; no gradients are tracked.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        BoundParams {
            vars: self.params.iter().map(|p| graph.constant(p.tensor.clone())).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(io_err)?;
        std::fs::write(path, buf).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.tensor.rank() as u32).to_le_bytes())?;
            for &d in p.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in p.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Overwrites values from a checkpoint. Every stored parameter must exist
    /// here with the same shape, and every parameter here must be present.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
        let records = read_checkpoint(&mut bytes.as_slice())?;
        self.load_records(records)
    }

    pub fn load_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if let Some(missing) = self.params.iter().find(|p| !records.iter().any(|(n, _)| *n == p.name)) {
            return Err(TensorError::Checkpoint(format!("parameter {} is missing from the checkpoint", missing.name)));
        }
        if let Some((extra, _)) = records.iter().find(|(n, _)| self.find(n).is_none()) {
            return Err(TensorError::Checkpoint(format!("unknown parameter {extra}")));
        }
        if records.len() != self.params.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                records.len(),
                self.params.len()
            )));
        }
        for (name, t) in records {
            let id = self
                .find(&name)
                .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = &mut self.params[id.0].tensor;
            if slot.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let mut payload = vec![0u8; numel * 8];
        r.read_exact(&mut payload).map_err(io_err)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| TensorError::Checkpoint(format!("parameter {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Parameters recorded on one graph, indexed by [`ParamId`].
pub struct BoundParams<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> BoundParams<'g> {
    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// One gradient per parameter, zeros where a parameter was unused.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.get_or_zeros(v)).collect()
    }
}
