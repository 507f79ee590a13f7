//! Network building blocks: parameters, layers, optimizer, checkpoint IO.
//!
//! Parameters live outside the autodiff graph. Each training step binds them
//! into the graph through a [`Ctx`]: in train mode as gradient leaves, in
//! inference mode as constants (which also makes "frozen" a structural fact
//! rather than a convention).

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::scalar::Scalar;

pub mod adam;
pub mod layers;
pub mod tensor_io;

pub use adam::Adam;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named trainable tensor.
pub struct Param<T: Scalar> {
    id: u64,
    pub name: String,
    pub value: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: ArrayD<T>) -> Self {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Per-step binding of parameters into the graph.
pub struct Ctx<T: Scalar> {
    train: bool,
    bound: HashMap<u64, Var<T>>,
}

impl<T: Scalar> Ctx<T> {
    /// Parameters become gradient leaves.
    pub fn train() -> Self {
        Ctx {
            train: true,
            bound: HashMap::new(),
        }
    }

    /// Parameters become constants: no gradients, no graph kept.
    pub fn inference() -> Self {
        Ctx {
            train: false,
            bound: HashMap::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Bind (or re-use the binding of) one parameter. A parameter used by
    /// several graph sites must map to a single leaf so its gradients sum.
    pub fn bind(&mut self, p: &Param<T>) -> Var<T> {
        if let Some(v) = self.bound.get(&p.id) {
            return v.clone();
        }
        let v = if self.train {
            Var::leaf(p.value.clone())
        } else {
            Var::constant(p.value.clone())
        };
        self.bound.insert(p.id, v.clone());
        v
    }

    pub fn leaf_of(&self, id: u64) -> Option<&Var<T>> {
        self.bound.get(&id)
    }
}

/// Anything that owns parameters.
pub trait NetModule<T: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
}

pub fn param_count<T: Scalar>(net: &dyn NetModule<T>) -> usize {
    let mut n = 0;
    net.visit_params(&mut |p| n += p.len());
    n
}

/// Order-sensitive digest of every parameter tensor; used by the freeze
/// contracts ("bit-identical across the other component's step").
pub fn params_hash<T: Scalar>(net: &dyn NetModule<T>) -> String {
    let mut hasher = Sha256::new();
    net.visit_params(&mut |p| {
        hasher.update(p.name.as_bytes());
        for &v in p.value.iter() {
            hasher.update((v.as_f64() as f32).to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Snapshot parameters as (name, tensor) pairs in visit order.
pub fn export_params<T: Scalar>(net: &dyn NetModule<T>) -> Vec<(String, ArrayD<T>)> {
    let mut out = Vec::new();
    net.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
    out
}

/// Load a snapshot produced by [`export_params`]; names and shapes must match
/// in order.
pub fn import_params<T: Scalar>(
    net: &mut dyn NetModule<T>,
    mut tensors: std::vec::IntoIter<(String, ArrayD<T>)>,
) -> crate::Result<()> {
    let mut err = None;
    net.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match tensors.next() {
            Some((name, value)) => {
                if name != p.name {
                    err = Some(format!("expected parameter `{}`, found `{name}`", p.name));
                } else if value.shape() != p.value.shape() {
                    err = Some(format!(
                        "parameter `{name}` shape {:?} != checkpoint {:?}",
                        p.value.shape(),
                        value.shape()
                    ));
                } else {
                    p.value = value;
                }
            }
            None => err = Some(format!("checkpoint ended before parameter `{}`", p.name)),
        }
    });
    if err.is_none() && tensors.next().is_some() {
        err = Some("checkpoint holds more tensors than the network".into());
    }
    match err {
        Some(e) => Err(crate::Error::Checkpoint(e)),
        None => Ok(()),
    }
}
