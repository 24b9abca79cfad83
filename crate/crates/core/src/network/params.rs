use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BN_EPS, BN_MOMENTUM};
use crate::autodiff::{BatchNormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

const RUNNING_MEAN: &str = "running_mean";
const RUNNING_VAR: &str = "running_var";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Named tensors of one network: trainable weights plus batch-norm buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

pub(crate) fn is_buffer(name: &str) -> bool {
    name.ends_with(RUNNING_MEAN) || name.ends_with(RUNNING_VAR)
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Trainable tensors, excluding running statistics.
    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter().filter(|(k, _)| !is_buffer(k))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().map(|(k, _)| k.clone()).collect()
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Tensors whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Records every trainable tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .trainable()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Bit-level fingerprint over names, shapes and values.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.to_mast_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            match self.tensors.get(&s.name) {
                None => return Err(Error::Contract(format!("missing parameter `{}`", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::shape(
                        "parameters",
                        format!("`{}` has shape {:?}, expected {:?}", s.name, t.shape(), s.shape),
                    ))
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let known: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&String> = self.tensors.keys().filter(|k| !known.contains(&k.as_str())).collect();
            return Err(Error::Contract(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }
}

/// Deterministic initialization: He-normal weights, zero biases, unit gammas.
pub fn init_params<T: Real>(specs: &[ParamSpec], seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for s in specs {
        let t = match s.init {
            Init::Zeros => Tensor::zeros(&s.shape),
            Init::Ones => Tensor::ones(&s.shape),
            Init::He { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(&s.shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
            }
        };
        store.insert(s.name.clone(), t)?;
    }
    Ok(store)
}

/// Tape handles for one network's trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }
}

/// Source of batch-norm statistics for a whole forward pass.
pub enum Norm<'a, T> {
    /// Batch statistics; running statistics in the store are updated when present.
    Train(Option<&'a mut ParamStore<T>>),
    Eval(&'a ParamStore<T>),
}

impl<T: Real> Norm<'_, T> {
    pub fn is_train(&self) -> bool {
        matches!(self, Norm::Train(_))
    }
}

pub(crate) fn bn_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), &[channels], Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), &[channels], Init::Zeros),
        ParamSpec::new(format!("{prefix}.{RUNNING_MEAN}"), &[channels], Init::Zeros),
        ParamSpec::new(format!("{prefix}.{RUNNING_VAR}"), &[channels], Init::Ones),
    ]
}

pub(crate) fn batchnorm<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    norm: &mut Norm<'_, T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gamma = params.get(&format!("{prefix}.gamma"))?;
    let beta = params.get(&format!("{prefix}.beta"))?;
    let mean_name = format!("{prefix}.{RUNNING_MEAN}");
    let var_name = format!("{prefix}.{RUNNING_VAR}");
    let missing = |n: &str| Error::Contract(format!("missing running statistics `{n}`"));
    match norm {
        Norm::Eval(store) => {
            let mean = store.get(&mean_name).ok_or_else(|| missing(&mean_name))?;
            let var = store.get(&var_name).ok_or_else(|| missing(&var_name))?;
            let mode = BatchNormMode::Eval {
                mean: mean.data(),
                var: var.data(),
            };
            tape.batchnorm(x, gamma, beta, mode, BN_EPS)
        }
        Norm::Train(None) => tape.batchnorm(
            x,
            gamma,
            beta,
            BatchNormMode::Train {
                running: None,
                momentum: BN_MOMENTUM,
            },
            BN_EPS,
        ),
        Norm::Train(Some(store)) => {
            let mut mean = store.get(&mean_name).ok_or_else(|| missing(&mean_name))?.clone();
            let mut var = store.get(&var_name).ok_or_else(|| missing(&var_name))?.clone();
            let y = tape.batchnorm(
                x,
                gamma,
                beta,
                BatchNormMode::Train {
                    running: Some((mean.data_mut(), var.data_mut())),
                    momentum: BN_MOMENTUM,
                },
                BN_EPS,
            )?;
            *store.get_mut(&mean_name).expect("checked above") = mean;
            *store.get_mut(&var_name).expect("checked above") = var;
            Ok(y)
        }
    }
}

pub(crate) fn conv<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    prefix: &str,
    x: Var,
    kernel: usize,
    with_bias: bool,
) -> Result<Var> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = if with_bias {
        Some(params.get(&format!("{prefix}.bias"))?)
    } else {
        None
    };
    tape.conv2d(x, w, b, kernel / 2, 1)
}

pub(crate) fn conv_specs(prefix: &str, cin: usize, cout: usize, kernel: usize, with_bias: bool) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::new(
        format!("{prefix}.weight"),
        &[cout, cin, kernel, kernel],
        Init::He {
            fan_in: cin * kernel * kernel,
        },
    )];
    if with_bias {
        v.push(ParamSpec::new(format!("{prefix}.bias"), &[cout], Init::Zeros));
    }
    v
}
