//! Parameter storage, initialization, the graph binder, and Adam.
//!
//! All network parameters live in one flat [`Params`] store keyed by dotted
//! names (`"vae.enc1.weight"`, `"temporal.block2.gamma"`, ...). The first
//! name segment is the parameter group; training stages declare which groups
//! are trainable and everything else stays frozen. Group hashes over the
//! f32-quantized bytes back the freeze ledger.

use crate::autograd::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Flat named-parameter store with deterministic (sorted) iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }

    pub fn expect(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let slot = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        assert_eq!(slot.shape(), value.shape(), "shape change for {name}");
        *slot = value;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across parameters whose name starts with `prefix`.
    pub fn group_element_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Distinct group names (first dotted segment).
    pub fn group_names(&self) -> Vec<String> {
        let mut groups: Vec<String> = self
            .entries
            .keys()
            .map(|k| k.split('.').next().unwrap_or(k).to_string())
            .collect();
        groups.dedup();
        groups
    }

    /// Moves every entry of `other` into `self` (names must not collide).
    pub fn absorb(&mut self, other: Params) {
        for (name, value) in other.entries {
            self.insert(name, value);
        }
    }

    /// Drops all parameters in a group (used when re-initializing a stage).
    pub fn remove_group(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    /// Rounds every parameter to f32 precision. Stage outputs go through
    /// this before checkpointing so a save/load round trip is bit-exact and
    /// reloaded models reproduce the stage's forward outputs.
    pub fn quantize_f32(&mut self) {
        for value in self.entries.values_mut() {
            value.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// SHA-256 over the f32-quantized little-endian bytes of a group
    /// (names and shapes included), in sorted name order.
    pub fn group_hash(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in value.iter() {
                hasher.update((*v as f32).to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hashes of every group in the store.
    pub fn all_group_hashes(&self) -> BTreeMap<String, String> {
        self.group_names()
            .into_iter()
            .map(|g| {
                let hash = self.group_hash(&format!("{g}."));
                (g, hash)
            })
            .collect()
    }
}

/// Weight initialization mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He/Kaiming normal: `N(0, 2/fan_in)`.
    He,
    /// All zeros — used for the layers that inject offsets/guidance so an
    /// untrained model perturbs the latent by exactly nothing.
    Zero,
}

fn he_array(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let mut rng = derive_rng(seed, name);
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("init shape")
}

/// Adds `{name}.weight` and `{name}.bias` for a 2D convolution. Parameter
/// seeds derive from `(seed, full parameter name)`, so initialization does
/// not depend on creation order.
pub fn init_conv2d(
    params: &mut Params,
    seed: u64,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    init: Init,
    bias_value: f64,
) {
    let wname = format!("{name}.weight");
    let weight = match init {
        Init::He => he_array(seed, &wname, &[c_out, c_in, k, k], c_in * k * k),
        Init::Zero => ArrayD::zeros(IxDyn(&[c_out, c_in, k, k])),
    };
    params.insert(wname, weight);
    params.insert(
        format!("{name}.bias"),
        ArrayD::from_elem(IxDyn(&[c_out]), bias_value),
    );
}

/// Adds `{name}.weight` and `{name}.bias` for a temporal 3D convolution
/// with a cubic kernel.
pub fn init_conv3d(params: &mut Params, seed: u64, name: &str, c_in: usize, c_out: usize, k: usize) {
    let wname = format!("{name}.weight");
    let weight = he_array(seed, &wname, &[c_out, c_in, k, k, k], c_in * k * k * k);
    params.insert(wname, weight);
    params.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out])));
}

/// Adds `{name}.gamma` (ones) and `{name}.beta` (zeros) for group norm.
pub fn init_group_norm(params: &mut Params, name: &str, channels: usize) {
    params.insert(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])));
    params.insert(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
}

/// Adds `{name}.weight (out, in)` and `{name}.bias (out)`.
pub fn init_linear(params: &mut Params, seed: u64, name: &str, in_dim: usize, out_dim: usize) {
    let wname = format!("{name}.weight");
    let weight = he_array(seed, &wname, &[out_dim, in_dim], in_dim);
    params.insert(wname, weight);
    params.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_dim])));
}

/// Sinusoidal embedding of integer timesteps, `(N, dim)` with sin in the
/// first half and cos in the second.
pub fn sinusoidal_embedding(steps: &[usize], dim: usize) -> Array2<f64> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array2::zeros((steps.len(), dim));
    for (n, &t) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            out[[n, i]] = (t as f64 * freq).sin();
            out[[n, i + half]] = (t as f64 * freq).cos();
        }
    }
    out
}

/// Binds parameters from a [`Params`] store into a [`Graph`], marking only
/// the declared trainable groups as differentiable. Keeps the name → node
/// mapping so gradients can be read back by parameter name.
pub struct GraphCtx<'a> {
    pub graph: Graph,
    params: &'a Params,
    trainable: Vec<String>,
    bound: BTreeMap<String, NodeId>,
}

impl<'a> GraphCtx<'a> {
    /// Context for training: parameters under any of `trainable` prefixes
    /// get gradients; everything else is frozen.
    pub fn new(params: &'a Params, trainable: &[&str]) -> Self {
        Self {
            graph: Graph::new(),
            params,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            bound: BTreeMap::new(),
        }
    }

    /// Context with every parameter frozen (pure forward passes).
    pub fn inference(params: &'a Params) -> Self {
        Self::new(params, &[])
    }

    pub fn input(&mut self, value: ArrayD<f64>) -> NodeId {
        self.graph.constant(value)
    }

    /// Binds a named parameter (once per graph) as a leaf.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let value = self.params.expect(name).clone();
        let trainable = self.trainable.iter().any(|p| name.starts_with(p.as_str()));
        let id = self.graph.leaf(value, trainable);
        self.bound.insert(name.to_string(), id);
        id
    }

    pub fn conv2d(&mut self, x: NodeId, name: &str, stride: usize, pad: usize) -> NodeId {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        self.graph.conv2d(x, w, b, stride, pad)
    }

    pub fn conv3d_temporal(&mut self, x: NodeId, name: &str) -> NodeId {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        self.graph.conv3d_temporal(x, w, b)
    }

    pub fn group_norm(&mut self, x: NodeId, name: &str, groups: usize) -> NodeId {
        let gamma = self.param(&format!("{name}.gamma"));
        let beta = self.param(&format!("{name}.beta"));
        self.graph.group_norm(x, gamma, beta, groups, 1e-5)
    }

    pub fn linear(&mut self, x: NodeId, name: &str) -> NodeId {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        self.graph.linear(x, w, b)
    }

    /// Collects gradients for every bound trainable parameter.
    pub fn grads_by_name(&self, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            if let Some(g) = grads.get(id) {
                if self.graph.needs_grad(id) {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

/// Adam with bias correction; update order is the sorted gradient-name
/// order, so steps are deterministic.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let value = params
                .get(name)
                .ok_or_else(|| Error::Parameter(format!("gradient for unknown parameter {name}")))?
                .clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *m = m.mapv(|v| v * self.beta1) + grad.mapv(|g| g * (1.0 - self.beta1));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *v = v.mapv(|x| x * self.beta2) + grad.mapv(|g| g * g * (1.0 - self.beta2));

            let mut updated = value;
            ndarray::Zip::from(&mut updated)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            params.set(name, updated);
        }
        Ok(())
    }
}
