//! Parameter storage, seeded initialisation and small differentiable helpers.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

enum Source {
    Seeded(ChaCha8Rng),
    Loaded(HashMap<String, Tensor>),
}

/// Named tensors for one model, created either from a seeded RNG or from a
/// checkpoint. Trainable stores wrap every tensor in a [`Var`]; frozen stores
/// keep plain tensors so no gradient is ever tracked for them.
pub struct ParamStore {
    source: Source,
    trainable: bool,
    device: Device,
    dtype: DType,
    tensors: BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn seeded(seed: u64, trainable: bool, device: &Device, dtype: DType) -> Self {
        Self {
            source: Source::Seeded(ChaCha8Rng::seed_from_u64(seed)),
            trainable,
            device: device.clone(),
            dtype,
            tensors: BTreeMap::new(),
            vars: BTreeMap::new(),
        }
    }

    pub fn from_tensors(
        tensors: HashMap<String, Tensor>,
        trainable: bool,
        device: &Device,
        dtype: DType,
    ) -> Self {
        Self {
            source: Source::Loaded(tensors),
            trainable,
            device: device.clone(),
            dtype,
            tensors: BTreeMap::new(),
            vars: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Fails if a loaded checkpoint carried tensors that no layer asked for.
    pub fn finish(&mut self) -> Result<()> {
        if let Source::Loaded(rest) = &self.source {
            if !rest.is_empty() {
                let mut names: Vec<_> = rest.keys().cloned().collect();
                names.sort();
                return Err(Error::Checkpoint(format!("unused tensors: {names:?}")));
            }
        }
        Ok(())
    }

    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.tensors.contains_key(name) {
            return Err(Error::invalid("parameter", format!("duplicate name {name}")));
        }
        let t = match &mut self.source {
            Source::Seeded(rng) => {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Const(v) => vec![v; n],
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| d.sample(rng)).collect()
                    }
                    Init::Uniform(bound) => {
                        let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                        (0..n).map(|_| d.sample(rng)).collect()
                    }
                };
                Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?
            }
            Source::Loaded(map) => {
                let t = map
                    .remove(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_device(&self.device)?.to_dtype(self.dtype)?
            }
        };
        let t = if self.trainable {
            let var = Var::from_tensor(&t)?;
            let t = var.as_tensor().clone();
            self.vars.insert(name.to_string(), var);
            t
        } else {
            t
        };
        self.tensors.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.take(name, shape, init)
    }

    /// `k x k` convolution, stride 1, "same" zero padding, Kaiming-normal weights.
    pub fn conv2d(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<Conv2d> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = self.take(&format!("{name}.weight"), &[cout, cin, k, k], Init::Normal(std))?;
        let b = self.take(&format!("{name}.bias"), &[cout], Init::Zeros)?;
        let cfg = Conv2dConfig {
            padding: k / 2,
            ..Default::default()
        };
        Ok(Conv2d::new(w, Some(b), cfg))
    }

    /// Dense layer with the usual `U(-1/sqrt(in), 1/sqrt(in))` weights.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        self.linear_init(name, din, dout, Init::Uniform(1.0 / (din as f64).sqrt()))
    }

    pub fn linear_init(&mut self, name: &str, din: usize, dout: usize, weight: Init) -> Result<Linear> {
        let w = self.take(&format!("{name}.weight"), &[dout, din], weight)?;
        let b = self.take(&format!("{name}.bias"), &[dout], Init::Zeros)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn named_tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Overwrites a trainable parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid("parameter", format!("no trainable parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.elem_count()).sum()
    }

    /// SHA-256 over every tensor in name order, as raw little-endian f64s.
    pub fn checksum(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + e^x)` in the overflow-free form `relu(x) + log(1 + e^{-|x|})`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Sum of squares over all entries except the leading batch dimension.
pub fn sum_sq_per_item(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.flatten_from(1)?.sum(D::Minus1)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
