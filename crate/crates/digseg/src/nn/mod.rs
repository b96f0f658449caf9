//! Minimal neural-net toolkit with hand-written backprop.
//!
//! Everything is generic over the float type: training runs in f32 for
//! speed, while the finite-difference gradient checks instantiate the same
//! layers in f64. Layers expose explicit `forward -> (output, cache)` and
//! `backward(cache, dy, grads)` pairs; parameters are reached through a
//! visitor so the optimizer, the checkpoint writer and the gradient checker
//! all enumerate the exact same set.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod optim;

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, NdFloat};
use num_traits::FromPrimitive;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Float element the net is instantiated over.
pub trait Elem: NdFloat + FromPrimitive + Default {
    fn into_f64(self) -> f64;
}

impl Elem for f32 {
    fn into_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Elem for f64 {
    fn into_f64(self) -> f64 {
        self
    }
}

/// Shorthand used all over the layer code.
#[inline]
pub fn c<F: Elem>(v: f64) -> F {
    <F as FromPrimitive>::from_f64(v).expect("finite cast")
}

/// Named parameter visitor. Implementors must visit parameters in a stable
/// order and use '.'-separated path names unique within the model.
pub trait Params<F: Elem> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }

    /// Snapshot all parameters as f64 arrays keyed by name.
    fn export(&self) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, v| {
            out.insert(name.to_string(), v.mapv(Elem::into_f64));
        });
        out
    }

    /// Load parameters from an f64 snapshot; every model parameter must be
    /// present with a matching shape.
    fn import(&mut self, src: &BTreeMap<String, ArrayD<f64>>) -> crate::error::Result<()> {
        let mut missing = Vec::new();
        self.visit_mut("", &mut |name, mut v| match src.get(name) {
            Some(a) if a.shape() == v.shape() => {
                v.zip_mut_with(a, |dst, s| *dst = c::<F>(*s));
            }
            Some(a) => missing.push(format!("{name}: shape {:?} vs {:?}", a.shape(), v.shape())),
            None => missing.push(format!("{name}: absent")),
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(crate::error::Error::Checkpoint(format!(
                "parameter mismatch: {}",
                missing.join("; ")
            )))
        }
    }
}

/// Accumulating gradient store keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Grads<F: Elem> {
    map: BTreeMap<String, ArrayD<F>>,
}

impl<F: Elem> Default for Grads<F> {
    fn default() -> Self {
        Self { map: BTreeMap::new() }
    }
}

impl<F: Elem> Grads<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, g: ArrayD<F>) {
        match self.map.get_mut(name) {
            Some(acc) => *acc = &*acc + &g,
            None => {
                self.map.insert(name.to_string(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.map.get(name)
    }

    pub fn scale(&mut self, s: F) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }

    /// Merge another gradient store (summing shared names).
    pub fn merge(&mut self, other: Grads<F>) {
        for (k, v) in other.map {
            self.add(&k, v);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v.into_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.map.iter()
    }
}

/// Join a path prefix with a component.
pub fn path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal init with the given std.
pub fn randn<F: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<F> {
    let dist = StandardNormal;
    ArrayD::from_shape_simple_fn(shape.to_vec(), || {
        let v: f64 = dist.sample(rng);
        c::<F>(v * std)
    })
}

/// Kaiming-style std for a layer with the given fan-in.
pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn grads_accumulate() {
        let mut g: Grads<f64> = Grads::new();
        g.add("a", ArrayD::from_elem(vec![2], 1.5));
        g.add("a", ArrayD::from_elem(vec![2], 0.5));
        assert_eq!(g.get("a").unwrap()[[0]], 2.0);
    }

    #[test]
    fn randn_has_roughly_requested_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: ArrayD<f64> = randn(&mut rng, &[10_000], 0.5);
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        assert!((var.sqrt() - 0.5).abs() < 0.02);
    }
}
