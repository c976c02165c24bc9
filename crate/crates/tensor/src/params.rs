use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::error::{Result, TensorError};
use crate::{Float, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Vec<F>,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters and their gradient
/// accumulators.
///
/// Model structs only hold [`ParamId`]s, so two stores built by the same
/// constructor sequence (or a [`ParamStore::duplicate`]) can be driven by the
/// same model description. The momentum branch of contrastive training
/// relies on this.
#[derive(Debug)]
pub struct ParamStore<F> {
    uid: u64,
    params: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = vec![F::zero(); value.numel()];
        self.params.push(Param { name, value, grad, trainable: true });
        ParamId(id)
    }

    /// Deep copy with a fresh identity; gradients are reset.
    pub fn duplicate(&self) -> Self {
        let mut out = Self::new();
        for p in &self.params {
            let id = out.add(p.name.clone(), p.value.clone());
            out.params[id.0].trainable = p.trainable;
        }
        out
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[F] {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, on: bool) {
        for p in &mut self.params {
            p.trainable = on;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Order-sensitive FNV-1a hash over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for p in &self.params {
            p.name.bytes().for_each(&mut eat);
            for v in p.value.data() {
                v.as_f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .params
                .iter()
                .map(|p| NamedTensor::from_tensor(&p.name, &p.value))
                .collect(),
        }
    }

    /// Copies values for every parameter whose name appears in `ckpt`, with
    /// `prefix` stripped from checkpoint names. Returns how many were loaded.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<usize> {
        let mut loaded = 0;
        for t in &ckpt.tensors {
            let Some(name) = t.name.strip_prefix(prefix) else { continue };
            let Some(id) = self.find(name) else { continue };
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_from",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape.clone(),
                });
            }
            let vals = t.data.to_f64();
            for (dst, src) in p.value.data_mut().iter_mut().zip(vals) {
                *dst = F::cast(src);
            }
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Like [`load_from`](Self::load_from) but every parameter must be found.
    pub fn load_all(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        let n = self.load_from(ckpt, prefix)?;
        if n != self.params.len() {
            let missing: Vec<_> = self
                .params
                .iter()
                .filter(|p| ckpt.get(&format!("{prefix}{}", p.name)).is_none())
                .map(|p| p.name.as_str())
                .collect();
            return Err(TensorError::Format(format!("missing tensors {missing:?}")));
        }
        Ok(())
    }
}
