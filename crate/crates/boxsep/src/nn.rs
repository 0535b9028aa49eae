//! Named parameters, layers, optimizer, and the tensor archive format.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names. A
//! forward pass binds them onto a fresh tape through a [`Ctx`], which
//! remembers the name ↔ tape-variable mapping so gradients can be routed
//! back by name after the backward sweep.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::rng::seeded_rng;
use crate::tensor::{conv_out_size, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("bad tensor archive: {0}")]
    BadArchive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How a parameter tensor is filled at registration.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform(-bound, bound) with bound = sqrt(6 / fan_in): the standard
    /// ReLU-gain initialization.
    KaimingUniform { fan_in: usize },
}

/// Named parameter tensors with order-independent deterministic init.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f32>>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            seed,
        }
    }

    /// Creates the tensor if absent. Values depend only on the store seed
    /// and the parameter name, never on registration order.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) {
        if self.params.contains_key(name) {
            return;
        }
        let value = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                let mut rng = seeded_rng(self.seed, name, 0);
                ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
            }
        };
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>, NnError> {
        self.params
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f32>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> &BTreeMap<String, ArrayD<f32>> {
        &self.params
    }

    /// Replaces the whole store contents (checkpoint load).
    pub fn load_tensors(&mut self, tensors: BTreeMap<String, ArrayD<f32>>) {
        self.params = tensors;
    }
}

/// One forward pass: a tape plus the parameter bindings made on it.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    /// Binds a named parameter onto the tape (once; later calls reuse the
    /// same variable so gradients accumulate naturally).
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|_| panic!("parameter {name:?} was never registered"))
            .clone();
        let v = self.tape.leaf(value);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Extracts per-parameter gradients from a completed backward sweep.
    pub fn param_grads(&self, grads: &[Option<ArrayD<f32>>]) -> BTreeMap<String, ArrayD<f32>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.bound {
            if let Some(g) = &grads[var.0] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Adds `delta` into `acc`, creating entries as needed — used to accumulate
/// gradients across the examples of a batch.
pub fn accumulate_grads(
    acc: &mut BTreeMap<String, ArrayD<f32>>,
    delta: &BTreeMap<String, ArrayD<f32>>,
) {
    for (name, g) in delta {
        match acc.get_mut(name) {
            Some(a) => *a += g,
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
}

/// Fully connected layer `[n, in] -> [n, out]` with bias.
pub fn linear(ctx: &mut Ctx, x: Var, name: &str, out_features: usize) -> Var {
    let w = ctx.param(&format!("{name}.w"));
    let b = ctx.param(&format!("{name}.b"));
    let y = ctx.tape.matmul(x, w);
    let _ = out_features;
    ctx.tape.bias_add(y, b)
}

/// Registers the parameters [`linear`] expects.
pub fn register_linear(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize) {
    store.register(
        &format!("{name}.w"),
        &[in_features, out_features],
        Init::KaimingUniform { fan_in: in_features },
    );
    store.register(&format!("{name}.b"), &[out_features], Init::Zeros);
}

/// 2-D convolution over a single example `[1, cin, h, w] -> [1, cout, oh, ow]`.
///
/// Implemented as im2col + one matrix product; restricted to batch size 1,
/// which is all the per-example training loop needs and keeps the data
/// layout free of transposes on the batch axis.
pub fn conv2d(
    ctx: &mut Ctx,
    x: Var,
    name: &str,
    k: usize,
    stride: usize,
    pad: usize,
) -> Var {
    let shape = ctx.tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 4, "conv2d expects [1, c, h, w]");
    assert_eq!(shape[0], 1, "conv2d is single-example only");
    let (h, w) = (shape[2], shape[3]);
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);

    let weight = ctx.param(&format!("{name}.w")); // [cout, cin*k*k]
    let bias = ctx.param(&format!("{name}.b")); // [cout]
    let cout = ctx.tape.value(weight).shape()[0];

    let cols = ctx.tape.im2col(x, k, stride, pad); // [oh*ow, cin*k*k]
    let cols_t = ctx.tape.transpose2d(cols); // [cin*k*k, oh*ow]
    let y = ctx.tape.matmul(weight, cols_t); // [cout, oh*ow]
    let y = ctx.tape.reshape(y, &[1, cout, oh, ow]);
    ctx.tape.bias_add(y, bias)
}

/// Registers the parameters [`conv2d`] expects.
pub fn register_conv2d(
    store: &mut ParamStore,
    name: &str,
    in_channels: usize,
    out_channels: usize,
    k: usize,
) {
    let fan_in = in_channels * k * k;
    store.register(
        &format!("{name}.w"),
        &[out_channels, fan_in],
        Init::KaimingUniform { fan_in },
    );
    store.register(&format!("{name}.b"), &[out_channels], Init::Zeros);
}

/// Adam optimizer over named parameters.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: BTreeMap<String, ArrayD<f32>>,
    v: BTreeMap<String, ArrayD<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f32>>) {
        self.t += 1;
        let b1t = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let b2t = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        for (name, g) in grads {
            let p = match store.params.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / b1t as f32;
                    let vhat = *v / b2t as f32;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    /// Optimizer state as named tensors (for checkpointing). The step count
    /// is stored as a single-element tensor under `"t"`.
    pub fn export_state(&self) -> BTreeMap<String, ArrayD<f32>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.m {
            out.insert(format!("m.{k}"), v.clone());
        }
        for (k, v) in &self.v {
            out.insert(format!("v.{k}"), v.clone());
        }
        out.insert(
            "t".to_string(),
            ArrayD::from_elem(IxDyn(&[1]), self.t as f32),
        );
        out
    }

    pub fn import_state(&mut self, state: &BTreeMap<String, ArrayD<f32>>) {
        self.m.clear();
        self.v.clear();
        self.t = 0;
        for (k, v) in state {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), v.clone());
            } else if k == "t" {
                self.t = v.iter().copied().next().unwrap_or(0.0) as u64;
            }
        }
    }
}

// --- Tensor archive ---------------------------------------------------------

const ARCHIVE_MAGIC: &[u8; 4] = b"BXSP";
const ARCHIVE_VERSION: u32 = 1;

/// Writes named f32 tensors to a flat binary archive.
pub fn save_tensor_archive(
    path: &Path,
    tensors: &BTreeMap<String, ArrayD<f32>>,
) -> Result<(), NnError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(ARCHIVE_MAGIC)?;
    out.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        out.write_all(name_bytes)?;
        out.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let data = tensor
            .as_slice()
            .expect("archive tensors must be standard layout");
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads an archive written by [`save_tensor_archive`].
pub fn load_tensor_archive(path: &Path) -> Result<BTreeMap<String, ArrayD<f32>>, NnError> {
    let mut rd = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    rd.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(NnError::BadArchive("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    rd.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != ARCHIVE_VERSION {
        return Err(NnError::BadArchive(format!(
            "unsupported version {version}"
        )));
    }
    rd.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        rd.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        rd.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| NnError::BadArchive(format!("bad name: {e}")))?;
        rd.read_exact(&mut u32buf)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut u64buf = [0u8; 8];
        for _ in 0..ndim {
            rd.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 4];
        rd.read_exact(&mut raw)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| NnError::BadArchive(format!("shape mismatch for {name}: {e}")))?;
        out.insert(name, tensor);
    }
    Ok(out)
}
