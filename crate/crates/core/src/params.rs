//! Named weight storage and binding to tensors for a forward pass.

use std::collections::{BTreeMap, HashMap};

use haze_tensor::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Host-side master copy of all weights, kept in f32 and ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f32>) {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        let name = name.into();
        let prev = self.params.insert(
            name.clone(),
            Param {
                shape: shape.to_vec(),
                values,
            },
        );
        assert!(prev.is_none(), "parameter `{name}` registered twice");
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }

    pub fn size_in_bytes(&self, dtype: DType) -> usize {
        self.num_scalars() * dtype.size_in_bytes()
    }

    /// Set every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.values.iter_mut().for_each(|v| *v = 0.0);
                n += 1;
            }
        }
        n
    }

    /// Upload all weights as `dtype` tensors, optionally as gradient leaves.
    pub fn bind(&self, dtype: DType, track: bool) -> Bound {
        self.bind_with(dtype, track, |_, p| p.values.iter().map(|&v| v as f64).collect())
    }

    /// Like [`bind`](Self::bind) but lets the caller supply the values
    /// (used for finite-difference probes in f64).
    pub fn bind_with(
        &self,
        dtype: DType,
        track: bool,
        mut values: impl FnMut(&str, &Param) -> Vec<f64>,
    ) -> Bound {
        let tensors = self
            .params
            .iter()
            .map(|(name, p)| {
                let t = Tensor::from_f64_as(values(name, p), &p.shape, dtype);
                (name.clone(), if track { t.requires_grad() } else { t })
            })
            .collect();
        Bound { tensors, dtype }
    }
}

/// Weights living as tensors for the duration of a forward (and backward)
/// pass.
pub struct Bound {
    tensors: HashMap<String, Tensor>,
    dtype: DType,
}

impl Bound {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }
}

/// Registers parameters with their initial values.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Init<'a> {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, 0.02) truncated to two standard deviations.
    pub fn trunc_normal(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.trunc_normal_std(name, shape, INIT_STD);
    }

    /// Weights scaled by fan-in, `Normal(0, 1 / fan_in)` truncated to two
    /// standard deviations.
    pub fn fan_in(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) {
        self.trunc_normal_std(name, shape, 1.0 / (fan_in.max(1) as f64).sqrt());
    }

    fn trunc_normal_std(&mut self, name: impl Into<String>, shape: &[usize], std: f64) {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break (z * std) as f32;
                }
            })
            .collect();
        self.store.insert(name, shape, values);
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) {
        let n = shape.iter().product();
        self.store.insert(name, shape, vec![value; n]);
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], lo: f32, hi: f32) {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        self.store.insert(name, shape, values);
    }

    /// `{name}.weight` as `[out, in]` plus an optional zero `{name}.bias`.
    pub fn linear(&mut self, name: &str, input: usize, output: usize, bias: bool) {
        self.fan_in(format!("{name}.weight"), &[output, input], input);
        if bias {
            self.constant(format!("{name}.bias"), &[output], 0.0);
        }
    }

    /// Affine layer norm: unit gain, zero bias.
    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.constant(format!("{name}.gain"), &[dim], 1.0);
        self.constant(format!("{name}.bias"), &[dim], 0.0);
    }

    pub fn rms_norm(&mut self, name: &str, dim: usize) {
        self.constant(format!("{name}.gain"), &[dim], 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_truncated() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Init::new(&mut a, 7).linear("fc", 64, 32, true);
        Init::new(&mut b, 7).linear("fc", 64, 32, true);
        assert_eq!(a, b);
        let w = &a.get("fc.weight").unwrap().values;
        assert_eq!(a.get("fc.weight").unwrap().shape, vec![32, 64]);
        assert!(w.iter().all(|v| v.abs() <= 0.25 + 1e-7));
        let std = (w.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((0.1..0.125).contains(&std), "{std}");
        assert!(a.get("fc.bias").unwrap().values.iter().all(|&v| v == 0.0));
        assert_eq!(a.num_scalars(), 64 * 32 + 32);
    }

    #[test]
    fn bind_uploads_in_requested_dtype() {
        let mut s = ParamStore::new();
        Init::new(&mut s, 1).layer_norm("ln", 4);
        let b = s.bind(DType::F16, false);
        assert_eq!(b.get("ln.gain").dtype(), DType::F16);
        assert_eq!(b.get("ln.gain").to_vec_f32(), vec![1.0; 4]);
        assert!(b.try_get("missing").is_none());
        let tracked = s.bind(DType::F64, true);
        assert!(tracked.get("ln.bias").is_tracked());
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_are_bugs() {
        let mut s = ParamStore::new();
        let mut init = Init::new(&mut s, 0);
        init.rms_norm("x", 2);
        init.rms_norm("x", 2);
    }
}
