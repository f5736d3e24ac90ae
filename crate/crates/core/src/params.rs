//! Named tensor maps and deterministic parameter initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// How a parameter is filled at construction time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// Glorot uniform with the given fan-in / fan-out.
    XavierUniform { fan_in: usize, fan_out: usize },
}

#[derive(Debug, Clone, PartialEq)]
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

    /// Weight stored `[fan_in, fan_out]` so that `x · W` needs no transpose.
    pub fn linear(prefix: &str, fan_in: usize, fan_out: usize) -> [ParamSpec; 2] {
        [
            ParamSpec::new(
                format!("{prefix}.weight"),
                &[fan_in, fan_out],
                Init::XavierUniform { fan_in, fan_out },
            ),
            ParamSpec::new(format!("{prefix}.bias"), &[fan_out], Init::Zeros),
        ]
    }

    pub fn zero_linear(prefix: &str, fan_in: usize, fan_out: usize) -> [ParamSpec; 2] {
        [
            ParamSpec::new(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Zeros),
            ParamSpec::new(format!("{prefix}.bias"), &[fan_out], Init::Zeros),
        ]
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A generator keyed by `(seed, name)`, so one parameter's values never depend
/// on which other parameters exist.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

fn init_values(spec: &ParamSpec, seed: u64) -> Vec<f64> {
    let n = spec.numel();
    let mut rng = named_rng(seed, &spec.name);
    match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Normal(std) => (0..n)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect(),
        Init::XavierUniform { fan_in, fan_out } => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        }
    }
}

/// Ordered name → tensor map. Ordering is by name, which fixes the layout of
/// checkpoints and the iteration order of optimizer updates.
#[derive(Debug, Clone, Default)]
pub struct TensorMap {
    entries: BTreeMap<String, Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn initialize(specs: &[ParamSpec], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut map = TensorMap::new();
        for spec in specs {
            if map.entries.contains_key(&spec.name) {
                return Err(Error::State(format!("duplicate parameter {}", spec.name)));
            }
            let t = Tensor::from_vec(init_values(spec, seed), spec.shape.as_slice(), device)?
                .to_dtype(dtype)?;
            map.entries.insert(spec.name.clone(), t);
        }
        Ok(map)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::State(format!("missing tensor {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Drop every entry whose name starts with `prefix`; returns how many went.
    pub fn strip_prefix(&mut self, prefix: &str) -> usize {
        let before = self.entries.len();
        self.entries.retain(|k, _| !k.starts_with(prefix));
        before - self.entries.len()
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn sub_map(&self, prefix: &str) -> TensorMap {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        TensorMap { entries }
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        for (k, v) in &self.entries {
            out.entries.insert(k.clone(), v.to_dtype(dtype)?);
        }
        Ok(out)
    }

    /// Deep copy with no autograd history.
    pub fn detached_copy(&self) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        for (k, v) in &self.entries {
            out.entries.insert(k.clone(), v.detach().copy()?);
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        for (k, v) in &self.entries {
            out.entries.insert(k.clone(), v.zeros_like()?);
        }
        Ok(out)
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|t| t.elem_count()).sum()
    }

    /// Flattened values as f64, in name order.
    pub fn flat_values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .get(name)?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    /// Replace one element of one tensor (used by finite-difference probes).
    pub fn with_element(&self, name: &str, index: usize, value: f64) -> Result<TensorMap> {
        let t = self.get(name)?;
        let mut vals = self.flat_values(name)?;
        if index >= vals.len() {
            return Err(Error::InvalidInput(format!(
                "index {index} out of range for {name} ({} elements)",
                vals.len()
            )));
        }
        vals[index] = value;
        let replaced = Tensor::from_vec(vals, t.dims(), t.device())?.to_dtype(t.dtype())?;
        let mut out = self.clone();
        out.entries.insert(name.to_string(), replaced);
        Ok(out)
    }

    /// True when both maps hold the same names with bit-identical contents.
    pub fn bit_equal(&self, other: &TensorMap) -> Result<bool> {
        if self.entries.len() != other.entries.len() {
            return Ok(false);
        }
        for (k, a) in &self.entries {
            let Some(b) = other.entries.get(k) else {
                return Ok(false);
            };
            if a.dims() != b.dims() || a.dtype() != b.dtype() {
                return Ok(false);
            }
            if tensor_bits(a)? != tensor_bits(b)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

impl FromIterator<(String, Tensor)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        TensorMap {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Raw bit patterns of a tensor, for exact-equality checks.
pub fn tensor_bits(t: &Tensor) -> Result<Vec<u64>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.into_iter().map(|x| x.to_bits() as u64).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.into_iter().map(f64::to_bits).collect(),
        other => {
            return Err(Error::InvalidInput(format!("unsupported dtype {other:?}")));
        }
    })
}

/// Trainable parameters: a [`TensorMap`] whose tensors are autograd variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamStore {
    pub fn from_map(map: &TensorMap) -> Result<Self> {
        let mut names = Vec::with_capacity(map.len());
        let mut vars = Vec::with_capacity(map.len());
        for (k, v) in map.iter() {
            names.push(k.to_string());
            vars.push(Var::from_tensor(&v.detach().copy()?)?);
        }
        Ok(Self { names, vars })
    }

    /// View whose tensors share identity with the variables, so a loss built
    /// from it back-propagates into them.
    pub fn view(&self) -> TensorMap {
        self.names
            .iter()
            .cloned()
            .zip(self.vars.iter().map(|v| v.as_tensor().clone()))
            .collect()
    }

    /// Current values without autograd identity.
    pub fn snapshot(&self) -> Result<TensorMap> {
        self.view().detached_copy()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn dtype(&self) -> DType {
        self.vars.first().map(|v| v.dtype()).unwrap_or(DType::F32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_position() {
        let a = [
            ParamSpec::new("a", &[3], Init::Normal(1.0)),
            ParamSpec::new("b", &[3], Init::Normal(1.0)),
        ];
        let b = [ParamSpec::new("b", &[3], Init::Normal(1.0))];
        let ma = TensorMap::initialize(&a, 7, DType::F64, &Device::Cpu).unwrap();
        let mb = TensorMap::initialize(&b, 7, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(ma.flat_values("b").unwrap(), mb.flat_values("b").unwrap());
        assert_ne!(ma.flat_values("a").unwrap(), ma.flat_values("b").unwrap());
    }

    #[test]
    fn xavier_bounds_and_zero_init() {
        let specs = ParamSpec::linear("l", 10, 30);
        let m = TensorMap::initialize(&specs, 1, DType::F64, &Device::Cpu).unwrap();
        let bound = (6.0f64 / 40.0).sqrt();
        assert!(m.flat_values("l.weight").unwrap().iter().all(|w| w.abs() < bound));
        assert!(m.flat_values("l.bias").unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let specs = [
            ParamSpec::new("x", &[1], Init::Zeros),
            ParamSpec::new("x", &[1], Init::Zeros),
        ];
        assert!(TensorMap::initialize(&specs, 0, DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn strip_and_sub_map() {
        let specs = [
            ParamSpec::new("align.w", &[1], Init::Zeros),
            ParamSpec::new("backbone.w", &[1], Init::Zeros),
        ];
        let mut m = TensorMap::initialize(&specs, 0, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.sub_map("backbone.").names().collect::<Vec<_>>(), vec!["w"]);
        assert_eq!(m.strip_prefix("align."), 1);
        assert_eq!(m.len(), 1);
    }
}
