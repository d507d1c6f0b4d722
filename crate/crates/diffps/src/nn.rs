//! Parameter storage, tape binding, and the Adam optimizer.
//!
//! All trainable tensors live in a [`ParamStore`] keyed by hierarchical
//! names (`det.rpn.conv.w`, `reid.msfrn.lpm3.0.w1`, ...). The top-level
//! prefix names the branch, which makes the detection / re-ID parameter
//! disjointness checkable by name. A forward pass binds the whole store
//! onto a fresh tape; after backward, gradients are read back by name.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.params.insert(name.to_string(), value);
    }

    /// Gaussian init with the given std, seeded from (seed, name) so the
    /// value is independent of insertion order and training mode.
    pub fn init_randn(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) {
        let mut rng = util::rng_from(&[b"init", &seed.to_le_bytes(), name.as_bytes()]);
        let normal = StandardNormal;
        let v = ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let x: f64 = normal.sample(&mut rng);
            x * std
        });
        self.insert(name, v);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, ArrayD::from_elem(IxDyn(shape), value));
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Runtime(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Runtime(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, v) in &self.params {
            h.update(name.as_bytes());
            h.update(util::digest_array(v));
        }
        h.finalize().into()
    }

    pub fn to_json(&self) -> String {
        let entries: BTreeMap<String, ParamEntry> = self
            .params
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    ParamEntry {
                        shape: v.shape().to_vec(),
                        data: v.iter().copied().collect(),
                    },
                )
            })
            .collect();
        serde_json::to_string(&entries).expect("params serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let entries: BTreeMap<String, ParamEntry> =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("checkpoint parse: {e}")))?;
        let mut store = ParamStore::new();
        for (k, e) in entries {
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), e.data)
                .map_err(|_| Error::Config(format!("checkpoint shape mismatch for {k}")))?;
            store.params.insert(k, arr);
        }
        Ok(store)
    }

    /// Copy every parameter under `prefix` from `other` into `self`.
    pub fn adopt_prefix(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in &other.params {
            if k.starts_with(prefix) {
                self.params.insert(k.clone(), v.clone());
            }
        }
    }
}

/// All store parameters bound onto one tape, fetchable by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Self {
        let vars = store
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.input(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Wrap pre-bound variables; used by gradient checks that need to own
    /// the tape inputs.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Gradient of every bound parameter whose name passes the filter.
    pub fn grads(
        &self,
        store: &ParamStore,
        grads: &Gradients,
        keep: impl Fn(&str) -> bool,
    ) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if keep(name) {
                let shape = store.get(name).expect("bound param exists").shape().to_vec();
                out.insert(name.clone(), grads.get_or_zeros(*var, &shape));
            }
        }
        out
    }
}

/// Adam with per-parameter moment estimates and step counts.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>, u64)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            let (m, v, t) = self.state.entry(name.clone()).or_insert_with(|| {
                (
                    ArrayD::zeros(g.raw_dim()),
                    ArrayD::zeros(g.raw_dim()),
                    0,
                )
            });
            *t += 1;
            let tf = *t as f64;
            *m = &*m * self.beta1 + &(g * (1.0 - self.beta1));
            *v = &*v * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let mh = &*m / (1.0 - self.beta1.powf(tf));
            let vh = &*v / (1.0 - self.beta2.powf(tf));
            let upd = &mh / &(vh.mapv(f64::sqrt) + self.eps);
            *p -= &(upd * lr);
        }
        Ok(())
    }
}
