//! Named, seeded parameter storage on top of candle's `VarMap`.
//!
//! Initial values come from a ChaCha stream seeded by the caller, so two
//! models built from the same config and seed are bit-identical.

use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// `U(-bound, bound)`.
    Uniform(f64),
    Normal(f64),
    /// Identity convolution kernel: 1 at the spatial center of `w[i, i]`.
    ConvDelta,
}

pub struct ParamStore {
    vars: VarMap,
    dtype: DType,
    device: Device,
    rng: Mutex<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            vars: VarMap::new(),
            dtype,
            device: device.clone(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn root(&self) -> Params<'_> {
        Params {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.vars
    }

    /// All variables, sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.vars.data().lock().unwrap();
        let mut v: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn get_var(&self, name: &str) -> Option<Var> {
        self.vars.data().lock().unwrap().get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names and raw values, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.named_vars() {
            h.update(name.as_bytes());
            let vals = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.vars.save(path)?;
        Ok(())
    }

    /// Overwrite every variable with the same-named tensor from a safetensors file.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
        }
        self.vars.load(path)?;
        Ok(())
    }

    fn create(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        if let Some(existing) = self.get_var(&name) {
            if existing.shape() != &shape {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    existing.shape(),
                    shape
                )));
            }
            return Ok(existing.as_tensor().clone());
        }
        let n = shape.elem_count();
        let mut rng = self.rng.lock().unwrap();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng))
                .collect(),
            Init::ConvDelta => {
                let dims = shape.dims();
                if dims.len() != 4 || dims[0] != dims[1] {
                    return Err(Error::Shape(format!("delta init needs (C, C, kh, kw), got {dims:?}")));
                }
                let (c, kh, kw) = (dims[0], dims[2], dims[3]);
                let mut v = vec![0.0; n];
                for i in 0..c {
                    v[((i * c + i) * kh + kh / 2) * kw + kw / 2] = 1.0;
                }
                v
            }
        };
        drop(rng);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.data().lock().unwrap().insert(name, var);
        Ok(out)
    }
}

/// A path prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Params<'a> {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Params {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, shape.into(), init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
