//! Named parameter arrays with gradients, Adam state and checkpoint I/O.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{CoreError, Result};

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

struct Param {
    name: String,
    group: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    frozen: bool,
    weight_decay: f64,
}

/// All trainable arrays of a model, addressed by stable names
/// (`group.sub.kind`), plus their gradients and optimizer state.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. The group is everything before the first `.` in
    /// the name; gradient checks and freezing operate at group granularity.
    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter {name} registered twice"
        );
        let group = name.split('.').next().unwrap_or(name).to_string();
        let shape = value.shape().to_vec();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            frozen: false,
            weight_decay: 0.0,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.params[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// Ids in registration order (stable across runs).
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Distinct group names in registration order.
    pub fn groups(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for p in &self.params {
            if !seen.contains(&p.group) {
                seen.push(p.group.clone());
            }
        }
        seen
    }

    /// Freeze or thaw every parameter whose group matches. Frozen parameters
    /// accumulate no gradient and are skipped by the optimizer.
    pub fn set_group_frozen(&mut self, group: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.group == group {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    /// Decoupled weight decay for a group, applied on every optimizer step.
    /// Gate affine maps use this: gating commutes with the next layer's
    /// weights, and without a pull toward neutral that redundancy drifts the
    /// gate pre-activations into sigmoid saturation, erasing their
    /// code-dependent structure.
    pub fn set_group_weight_decay(&mut self, group: &str, rate: f64) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.group == group {
                p.weight_decay = rate;
                n += 1;
            }
        }
        n
    }

    pub fn add_grad(&mut self, id: ParamId, g: &Tensor) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        assert_eq!(p.grad.shape(), g.shape(), "gradient shape mismatch for {}", p.name);
        for (d, &gv) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *d += gv;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// One Adam update over all unfrozen parameters. Rejects non-finite
    /// gradients and never writes a non-finite value.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for p in &mut self.params {
            if p.frozen {
                continue;
            }
            if !p.grad.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    p.name
                )));
            }
            for i in 0..p.value.len() {
                let g = p.grad.data()[i];
                let m = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let update = cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon)
                    + cfg.learning_rate * p.weight_decay * p.value.data()[i];
                p.value.data_mut()[i] -= update;
            }
            if !p.value.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite value after update for parameter {}",
                    p.name
                )));
            }
        }
        Ok(())
    }

    /// Deep copy of values only (grads and Adam state reset). Used to retain
    /// the best-validation snapshot.
    pub fn snapshot_values(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[(String, Tensor)]) {
        for (name, value) in snapshot {
            let id = self.by_name[name];
            self.params[id.0].value = value.clone();
        }
    }
}

// Checkpoint container: named f64 arrays with a shape header plus
// string metadata, little-endian throughout.
const CHECKPOINT_MAGIC: &[u8; 8] = b"DILNCKP1";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializable checkpoint: model parameters, auxiliary arrays (codebook
/// state) and string metadata describing the configuration they belong to.
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let mut ck = Checkpoint::default();
        for p in &store.params {
            ck.arrays.insert(p.name.clone(), p.value.clone());
        }
        ck
    }

    /// Copy matching arrays into an already-built store. Every store
    /// parameter must be present with the right shape.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let arr = self.arrays.get(&name).ok_or_else(|| {
                CoreError::Shape(format!("checkpoint is missing parameter {name}"))
            })?;
            if arr.shape() != store.value(id).shape() {
                return Err(CoreError::Shape(format!(
                    "parameter {name}: expected shape {:?}, checkpoint has {:?}",
                    store.value(id).shape(),
                    arr.shape()
                )));
            }
            *store.value_mut(id) = arr.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            write_str(&mut buf, k);
            write_str(&mut buf, v);
        }
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            write_str(&mut buf, name);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)
            .map_err(|e| CoreError::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, at: 0 };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CoreError::Data(format!(
                "{} is not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::Data(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        let n_meta = r.u32()?;
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        let n_arrays = r.u32()?;
        for _ in 0..n_arrays {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            ck.arrays.insert(name, Tensor::from_vec(&shape, data));
        }
        Ok(ck)
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(CoreError::Data("truncated checkpoint file".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| CoreError::Data("bad utf8 in checkpoint".into()))
    }
}
