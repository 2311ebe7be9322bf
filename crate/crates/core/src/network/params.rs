use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SphereError};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Xavier/Glorot uniform over `(fan_in, fan_out)`.
    XavierUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
}

/// Named, trainable parameters in a fixed (sorted) order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a parameter, drawing its initial value from `rng`.
    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<Tensor> {
        assert!(!self.vars.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::XavierUniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Normal { std } => (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place (same shape required).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| SphereError::ConfigMismatch(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(SphereError::shape(var.dims(), value.dims()));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Adds independent `N(0, scale²)` noise to every parameter. Used to move
    /// away from zero-initialized gates in tests and diagnostics.
    pub fn perturb<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Result<()> {
        for var in self.vars.values() {
            let n = var.elem_count();
            let noise: Vec<f64> = (0..n)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect();
            let noise = Tensor::from_vec(noise, var.dims(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&var.as_tensor().add(&noise)?.detach())?;
        }
        Ok(())
    }

    /// Flat `f64` copy of a parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| SphereError::ConfigMismatch(format!("unknown parameter {name}")))?;
        Ok(var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}
