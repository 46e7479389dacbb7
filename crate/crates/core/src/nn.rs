//! Minimal parameter storage and layers on top of `candle-core`.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that a whole
//! model can be walked in a stable order for optimization and checkpointing.
//! Initialization draws from a caller-provided seeded generator, which keeps
//! every model bitwise reproducible from its seed.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

impl Init {
    /// Splits the scheme into a unit-scale scheme for storage and the factor
    /// applied at run time.
    fn equalized(self) -> (Init, f64) {
        match self {
            Init::Normal(std) if std > 0.0 => (Init::Normal(1.0), std),
            Init::Uniform(a) if a > 0.0 => (Init::Uniform(1.0), a),
            other => (other, 1.0),
        }
    }

    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
            Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..=a)).collect(),
        }
    }
}

/// Named, ordered collection of trainable variables sharing one dtype.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Registers a new parameter and returns a handle sharing its storage.
    pub fn create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let n = shape.iter().product();
        let data = init.sample(n, rng);
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites the value of an existing parameter, checking its shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Copies all values into a fresh store (independent storage).
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(Self {
            dtype: self.dtype,
            vars,
        })
    }

    /// Returns true when every parameter value is finite.
    pub fn all_finite(&self) -> Result<bool> {
        for var in self.vars.values() {
            let v: Vec<f64> = var.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Fully connected layer; weight is stored as `(in, out)`.
///
/// Weights are stored at unit scale and multiplied by the initialization
/// scale in the forward pass, so an optimizer step moves every layer by the
/// same relative amount regardless of fan-in.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    scale: f64,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let std = (2.0 / input as f64).sqrt();
        Self::with_init(store, name, input, output, bias, Init::Normal(std), rng)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (init, scale) = init.equalized();
        let weight = store.create(&format!("{name}.weight"), &[input, output], init, rng)?;
        let bias = if bias {
            Some(store.create(&format!("{name}.bias"), &[output], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, scale, bias })
    }

    /// Effective weight matrix.
    pub fn weight(&self) -> Result<Tensor> {
        Ok(self.weight.affine(self.scale, 0.0)?)
    }

    /// Applies the layer to a `(n, in)` matrix.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?.affine(self.scale, 0.0)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Square-kernel 2D convolution over `(n, c, h, w)` inputs.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    scale: f64,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = input * kernel * kernel;
        let scale = (2.0 / fan_in as f64).sqrt();
        let weight = store.create(
            &format!("{name}.weight"),
            &[output, input, kernel, kernel],
            Init::Normal(1.0),
            rng,
        )?;
        let bias = store.create(&format!("{name}.bias"), &[output], Init::Zeros, rng)?;
        Ok(Self {
            weight,
            scale,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?.affine(self.scale, 0.0)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(LEAKY_SLOPE, 0.0)?)?)
}

/// Numerically stable `ln(1 + e^x)` on tensors.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Reads a tensor of any float dtype back as `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}

/// Builds a tensor of the requested dtype from host `f64` data.
pub fn tensor_from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}
