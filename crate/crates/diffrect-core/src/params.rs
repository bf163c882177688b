//! Named parameter storage, initialization, and the SGD optimizer.
//!
//! All learnable tensors live in one flat `ParamStore` keyed by hierarchical
//! names (`seg.enc0.conv1.w`, ...). The autodiff tape borrows values from
//! here at graph-build time and returns gradients keyed the same way, so the
//! optimizer and the checkpoint format never need to know the network
//! structure.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct ParamEntry {
    value: ArrayD<f64>,
    momentum: ArrayD<f64>,
    /// Whether weight decay applies (conv/linear kernels yes; biases and
    /// normalization affines no).
    decay: bool,
}

/// Flat store of named parameters plus their momentum buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

/// Gradients keyed by parameter name, as returned by `Tape::backward`.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<String, ArrayD<f64>>,
}

impl Gradients {
    pub fn insert(&mut self, name: String, grad: ArrayD<f64>) {
        match self.grads.get_mut(&name) {
            Some(g) => *g += &grad,
            None => {
                // `dot` and friends may return transposed-stride arrays;
                // store gradients contiguously so downstream slicing works.
                let grad = if grad.is_standard_layout() {
                    grad
                } else {
                    grad.as_standard_layout().into_owned()
                };
                self.grads.insert(name, grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.grads.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// ℓ2 norm over the concatenation of every gradient tensor.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies every gradient in place.
    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            *g *= factor;
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn value(&self, name: &str) -> &ArrayD<f64> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Mutable access for tests and finite-difference probing.
    pub fn value_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    fn insert(&mut self, name: &str, value: ArrayD<f64>, decay: bool) {
        assert!(
            !self.entries.contains_key(name),
            "parameter {name:?} registered twice"
        );
        let momentum = ArrayD::zeros(value.raw_dim());
        self.entries
            .insert(name.to_string(), ParamEntry { value, momentum, decay });
    }

    /// He-normal conv kernel `{name}.w` of shape `[cout, cin·k²]` plus zero
    /// bias `{name}.b`.
    pub fn add_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) {
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[cout, fan_in]), |_| {
            rng.sample::<f64, _>(StandardNormal) * std
        });
        self.insert(&format!("{name}.w"), w, true);
        self.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])), false);
    }

    /// He-normal linear map `{name}.w` of shape `[out, inp]` plus zero bias.
    pub fn add_linear(&mut self, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) {
        let std = (2.0 / inp as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[out, inp]), |_| {
            rng.sample::<f64, _>(StandardNormal) * std
        });
        self.insert(&format!("{name}.w"), w, true);
        self.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out])), false);
    }

    /// Unit scale `{name}.g` and zero shift `{name}.beta` for a normalization
    /// layer over `c` channels.
    pub fn add_norm(&mut self, name: &str, c: usize) {
        self.insert(&format!("{name}.g"), ArrayD::ones(IxDyn(&[c])), false);
        self.insert(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])), false);
    }

    /// Registers an arbitrary tensor without weight decay. Used by tests to
    /// expose op inputs to the gradient checker.
    pub fn add_raw(&mut self, name: &str, value: ArrayD<f64>) {
        self.insert(name, value, false);
    }

    /// One SGD-with-momentum step:
    /// g ← grad + wd·w (decaying params), v ← μ·v + g, w ← w − lr·v.
    /// When `clip` is set, gradients are first rescaled so their global norm
    /// does not exceed it.
    pub fn sgd_step(
        &mut self,
        grads: &Gradients,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        clip: Option<f64>,
    ) {
        let mut factor = 1.0;
        if let Some(c) = clip {
            let norm = grads.global_norm();
            if norm > c {
                factor = c / norm;
            }
        }
        for (name, grad) in grads.iter() {
            let e = self
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name:?}"));
            assert_eq!(grad.shape(), e.value.shape(), "gradient shape mismatch for {name}");
            let mut g = grad * factor;
            if e.decay && weight_decay != 0.0 {
                g += &(weight_decay * &e.value);
            }
            e.momentum *= momentum;
            e.momentum += &g;
            e.value.scaled_add(-lr, &e.momentum);
        }
    }

    /// Serializes values and momentum buffers, little-endian f64, in name
    /// order. Round-trips bit-exactly.
    pub fn save<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, e) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[e.decay as u8])?;
            w.write_all(&(e.value.ndim() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in e.value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            for &v in e.momentum.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: &str| Error::parse("checkpoint", msg);
        let mut u64buf = [0u8; 8];
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u64buf).map_err(|_| bad("truncated count"))?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated name length"))?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 parameter name"))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(|_| bad("truncated decay flag"))?;
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated ndim"))?;
            let ndim = u32::from_le_bytes(u32buf) as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut u64buf).map_err(|_| bad("truncated shape"))?;
                dims.push(u64::from_le_bytes(u64buf) as usize);
            }
            let n: usize = dims.iter().product();
            let read_tensor = |r: &mut R| -> Result<ArrayD<f64>> {
                let mut vals = Vec::with_capacity(n);
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf).map_err(|_| bad("truncated tensor data"))?;
                    vals.push(f64::from_le_bytes(buf));
                }
                ArrayD::from_shape_vec(IxDyn(&dims), vals).map_err(|_| bad("bad tensor shape"))
            };
            let value = read_tensor(&mut r)?;
            let momentum = read_tensor(&mut r)?;
            store
                .entries
                .insert(name, ParamEntry { value, momentum, decay: flag[0] != 0 });
        }
        Ok(store)
    }
}
