use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::init::{glorot_limit, glorot_uniform_with};
use crate::error::{Error, Result};

/// How a parameter set was initialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitRecord {
    pub scheme: String,
    pub seed: u64,
}

/// Named trainable arrays of one network, in construction order.
///
/// The stored [`Var`]s are shared with the layers that use them, so updating
/// a value here changes the network.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    vars: IndexMap<String, Var>,
    limits: IndexMap<String, f64>,
    init: InitRecord,
}

impl ParameterSet {
    pub fn init_record(&self) -> &InitRecord {
        &self.init
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Glorot bound each convolution weight was drawn under, by parameter name.
    pub fn glorot_limits(&self) -> impl Iterator<Item = (&str, f64)> {
        self.limits.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Overwrites one array, checking that the name exists and the shape matches.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown layer parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "layer parameter `{name}` has shape {:?}, stored array has shape {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// SHA-256 over every name and the raw little-endian values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            for v in var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Independent copy whose values no longer track the original.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut vars = IndexMap::new();
        for (name, var) in &self.vars {
            vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(Self {
            vars,
            limits: self.limits.clone(),
            init: self.init.clone(),
        })
    }
}

/// Allocates Glorot-initialized convolution weights from one seeded stream.
pub(crate) struct ParamBuilder {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    set: ParameterSet,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            set: ParameterSet {
                vars: IndexMap::new(),
                limits: IndexMap::new(),
                init: InitRecord {
                    scheme: "glorot_uniform".to_string(),
                    seed,
                },
            },
        }
    }

    /// Weight of shape `shape` (Glorot) named `{prefix}.weight` and a zero bias of
    /// `bias_len` named `{prefix}.bias`.
    pub fn conv(
        &mut self,
        prefix: &str,
        shape: [usize; 4],
        fan_in: usize,
        fan_out: usize,
        bias_len: usize,
    ) -> Result<(Var, Var)> {
        let len = shape.iter().product();
        let values = glorot_uniform_with(fan_in, fan_out, len, &mut self.rng)?;
        let weight = Tensor::from_vec(values, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
        let weight = Var::from_tensor(&weight)?;
        let bias = Var::zeros(bias_len, self.dtype, &self.device)?;
        let wname = format!("{prefix}.weight");
        self.set.limits.insert(wname.clone(), glorot_limit(fan_in, fan_out)?);
        self.set.vars.insert(wname, weight.clone());
        self.set.vars.insert(format!("{prefix}.bias"), bias.clone());
        Ok((weight, bias))
    }

    pub fn finish(self) -> ParameterSet {
        self.set
    }
}
