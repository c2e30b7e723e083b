use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Which party of the adaptation setup owns an array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionTag {
    /// Shared encoder layers, frozen while adapting.
    Trunk,
    /// Adaptable encoder stages.
    Head,
    /// Latent-to-depth decoder, shared by both domains.
    Decoder,
    /// Additive residual branch on the latent.
    ResidualBranch,
    /// Latent-to-trunk-feature reconstruction branch.
    ReconBranch,
    FeatureDisc,
    DepthDisc,
    /// Optimizer moments and other solver state.
    Solver,
}

/// Whether an array is learned by gradient descent or tracked as a statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayRole {
    Weight,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub tag: PartitionTag,
    pub role: ArrayRole,
}

impl<T: Scalar> ParamArray<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of named, shaped, tagged arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    arrays: BTreeMap<String, ParamArray<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ParamArray<T>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamArray<T>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::shape(format!("missing parameter array `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamArray<T>> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("missing parameter array `{name}`")))
    }

    pub fn data(&self, name: &str) -> Result<&[T]> {
        Ok(&self.get(name)?.data)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamArray<T>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamArray<T>)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn names_with_tag(&self, tag: PartitionTag) -> BTreeSet<String> {
        self.arrays
            .iter()
            .filter(|(_, a)| a.tag == tag)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Learnable (non-statistic) arrays carrying `tag`.
    pub fn weights_with_tag(&self, tag: PartitionTag) -> BTreeSet<String> {
        self.arrays
            .iter()
            .filter(|(_, a)| a.tag == tag && a.role == ArrayRole::Weight)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn element_count(&self, filter: impl Fn(&ParamArray<T>) -> bool) -> usize {
        self.arrays.values().filter(|a| filter(a)).map(|a| a.len()).sum()
    }

    /// Array-wise bit equality restricted to arrays that pass `filter`. Both
    /// stores must hold the same names with the same shapes.
    pub fn bit_equal_where(&self, other: &ParamStore<T>, filter: impl Fn(&ParamArray<T>) -> bool) -> bool {
        if self.arrays.len() != other.arrays.len() {
            return false;
        }
        self.arrays.iter().zip(&other.arrays).all(|((na, a), (nb, b))| {
            na == nb
                && a.shape == b.shape
                && (!filter(a)
                    || a.data
                        .iter()
                        .zip(&b.data)
                        .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits)))
        })
    }

    pub fn bit_equal(&self, other: &ParamStore<T>) -> bool {
        self.bit_equal_where(other, |_| true)
    }

    /// Adds a convolution weight with He-normal initialization plus a zero
    /// bias. Weight layout is `[out, in, k, k]`.
    pub fn add_conv<R: Rng>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        tag: PartitionTag,
        gain: f64,
    ) {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = out_ch * in_ch * kernel * kernel;
        let data = (0..n).map(|_| lit::<T>(normal.sample(rng))).collect();
        self.insert(
            format!("{prefix}.weight"),
            ParamArray {
                shape: vec![out_ch, in_ch, kernel, kernel],
                data,
                tag,
                role: ArrayRole::Weight,
            },
        );
        self.insert(
            format!("{prefix}.bias"),
            ParamArray {
                shape: vec![out_ch],
                data: vec![T::zero(); out_ch],
                tag,
                role: ArrayRole::Weight,
            },
        );
    }

    /// Adds the four arrays of a batch-norm layer.
    pub fn add_norm(&mut self, prefix: &str, channels: usize, tag: PartitionTag) {
        let mut put = |suffix: &str, value: T, role| {
            self.insert(
                format!("{prefix}.{suffix}"),
                ParamArray {
                    shape: vec![channels],
                    data: vec![value; channels],
                    tag,
                    role,
                },
            )
        };
        put("gamma", T::one(), ArrayRole::Weight);
        put("beta", T::zero(), ArrayRole::Weight);
        put("running_mean", T::zero(), ArrayRole::RunningMean);
        put("running_var", T::one(), ArrayRole::RunningVar);
    }

    /// Sets every array under `prefix.` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        let dotted = format!("{prefix}.");
        for (name, a) in self.arrays.iter_mut() {
            if name.starts_with(&dotted) {
                a.data.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            arrays: self
                .arrays
                .iter()
                .map(|(n, a)| {
                    (
                        n.clone(),
                        ParamArray {
                            shape: a.shape.clone(),
                            data: a
                                .data
                                .iter()
                                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                                .collect(),
                            tag: a.tag,
                            role: a.role,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Gradient accumulator, optionally restricted to a set of array names.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    map: BTreeMap<String, Vec<T>>,
    only: Option<BTreeSet<String>>,
}

impl<T: Scalar> Grads<T> {
    /// Accumulates gradients for every array.
    pub fn all() -> Self {
        Grads {
            map: BTreeMap::new(),
            only: None,
        }
    }

    /// Accumulates gradients only for the named arrays.
    pub fn only(names: BTreeSet<String>) -> Self {
        Grads {
            map: BTreeMap::new(),
            only: Some(names),
        }
    }

    /// Accumulates nothing; backward passes still propagate input gradients.
    pub fn none() -> Self {
        Self::only(BTreeSet::new())
    }

    #[inline]
    pub fn wants(&self, name: &str) -> bool {
        self.only.as_ref().is_none_or(|s| s.contains(name))
    }

    pub fn slot(&mut self, name: &str, len: usize) -> &mut [T] {
        let v = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); len]);
        debug_assert_eq!(v.len(), len);
        v
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<T>)> {
        self.map.iter()
    }

    pub fn scale(&mut self, s: T) {
        for v in self.map.values_mut() {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Global L2 norm over every accumulated array.
    pub fn norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|v| v.iter())
            .map(|x| {
                let x = x.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm {
            self.scale(lit(max_norm / n));
        }
        n
    }
}
