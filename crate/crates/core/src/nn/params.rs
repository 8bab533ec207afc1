use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hash::fnv1a64;

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform on `[-bound, bound)`.
    Uniform(f64),
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    trainable: bool,
}

/// Named, seeded storage for every learned weight and running buffer of a model.
///
/// Each parameter draws its initial values from a generator seeded by the store
/// seed and the parameter's full name, so initialization does not depend on the
/// order in which layers are constructed.
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    seed: u64,
    entries: Arc<Mutex<BTreeMap<String, Entry>>>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            device: device.clone(),
            dtype,
            seed,
            entries: Arc::new(Mutex::new(BTreeMap::new())),
        }
    }

    pub fn cpu(seed: u64) -> Self {
        Self::new(seed, DType::F32, &Device::Cpu)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    /// Trainable variables in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.named(true).into_iter().map(|(_, v)| v).collect()
    }

    pub fn named_trainable(&self) -> Vec<(String, Var)> {
        self.named(true)
    }

    /// Every stored tensor (weights and buffers) in name order.
    pub fn named_all(&self) -> Vec<(String, Var)> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    fn named(&self, trainable: bool) -> Vec<(String, Var)> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .filter(|(_, e)| e.trainable == trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries.get(name).map(|e| e.var.clone())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("param store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Overwrites a stored tensor in place. Shapes must agree.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::CheckpointError(format!("unknown parameter {name:?}")))?;
        if var.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: stored {:?}, given {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    fn fetch(&self, name: String, shape: Shape, init: Init, trainable: bool) -> Result<Tensor> {
        let mut entries = self.entries.lock().expect("param store poisoned");
        if let Some(e) = entries.get(&name) {
            if e.var.shape() != &shape {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: already registered as {:?}, requested {:?}",
                    e.var.dims(),
                    shape.dims()
                )));
            }
            return Ok(e.var.as_tensor().clone());
        }
        let values = init_values(self.seed, &name, shape.elem_count(), init);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        entries.insert(name, Entry { var, trainable });
        Ok(out)
    }
}

fn init_values(seed: u64, name: &str, n: usize, init: Init) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c; n],
        Init::Uniform(bound) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()));
            (0..n)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                .collect()
        }
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn full_name(&self, name: &str) -> String {
        self.full(name)
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Tensor> {
        self.store.fetch(self.full(name), shape.into(), init, true)
    }

    /// A non-trainable stored tensor, such as a normalization running statistic.
    pub fn buffer<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Var> {
        let full = self.full(name);
        self.store.fetch(full.clone(), shape.into(), init, false)?;
        Ok(self.store.get(&full).expect("just inserted"))
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let a = ParamStore::cpu(3);
        let b = ParamStore::cpu(3);
        let a1 = a.root().param(4, "x", Init::Uniform(1.0)).unwrap();
        let _ = a.root().param(4, "y", Init::Uniform(1.0)).unwrap();
        let _ = b.root().param(4, "y", Init::Uniform(1.0)).unwrap();
        let b1 = b.root().param(4, "x", Init::Uniform(1.0)).unwrap();
        assert_eq!(
            a1.to_vec1::<f32>().unwrap(),
            b1.to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn refetch_returns_same_var() {
        let s = ParamStore::cpu(0);
        let t1 = s.root().pp("m").param((2, 2), "w", Init::Ones).unwrap();
        let t2 = s.root().pp("m").param((2, 2), "w", Init::Zeros).unwrap();
        assert_eq!(t1.id(), t2.id());
        assert!(s.root().pp("m").param((3, 2), "w", Init::Ones).is_err());
    }

    #[test]
    fn buffers_are_not_trainable() {
        let s = ParamStore::cpu(0);
        s.root().param(2, "w", Init::Ones).unwrap();
        s.root().buffer(2, "running", Init::Zeros).unwrap();
        assert_eq!(s.trainable_vars().len(), 1);
        assert_eq!(s.named_all().len(), 2);
    }
}
