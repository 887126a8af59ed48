//! Named parameter storage shared by models, optimizers and checkpoints.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Position of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered map from hierarchical names to tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidArgument("empty parameter name".into()));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let (idx, _) = self.tensors.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid parameter id")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Replaces every value with the same-named tensor from `other`.
    /// Names and shapes must agree exactly.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::InvalidArgument("parameter sets differ in size".into()));
        }
        for (name, t) in self.tensors.iter_mut() {
            let src = other
                .tensors
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "copy_from",
                    lhs: t.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Records every tensor as a leaf of `g`, in store order.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<Bound> {
        let vars = self
            .tensors
            .values()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Gradients of a bound store after `g.backward`, in store order.
    pub fn gradients(&self, g: &Graph<T>, bound: &Bound) -> Result<Vec<Tensor<T>>> {
        bound
            .vars
            .iter()
            .zip(self.tensors.values())
            .map(|(&v, t)| match g.grad(v) {
                Some(gr) => Ok(gr.clone()),
                None if !g.requires_grad(v) => Ok(Tensor::zeros(t.shape().to_vec())),
                None => Err(Error::InvalidArgument("backward has not run".into())),
            })
            .collect()
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles for a store whose tensors were recorded in order by the caller.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Builder that names parameters under a prefix and initializes them.
pub struct Initializer<'a, R: Rng> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Initializer<'a, R> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut R, prefix: &str) -> Self {
        Self { store, rng, prefix: prefix.to_string() }
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng) as f32);
        let n = self.full_name(name);
        self.store.insert(n, t)
    }

    /// He-normal initialization using the fan-in `shape[1..]`.
    pub fn he(&mut self, name: &str, shape: &[usize], gain: f64) -> Result<ParamId> {
        let fan_in: usize = shape[1..].iter().product();
        self.normal(name, shape, gain * (2.0 / fan_in as f64).sqrt())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        let n = self.full_name(name);
        self.store.insert(n, Tensor::full(shape.to_vec(), value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert("a.w", Tensor::zeros([2])).unwrap();
        let b = s.insert("b.w", Tensor::ones([3])).unwrap();
        assert!(s.insert("a.w", Tensor::zeros([1])).is_err());
        assert!(s.insert("", Tensor::zeros([1])).is_err());
        assert_eq!((a.index(), b.index()), (0, 1));
        assert_eq!(s.id("b.w"), Some(b));
        assert_eq!(s.scalar_count(), 5);
        assert_eq!(s.iter().map(|(n, _)| n).collect::<Vec<_>>(), ["a.w", "b.w"]);
    }

    #[test]
    fn bind_and_collect_gradients() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::from_slice([2], &[1.0, 2.0]).unwrap()).unwrap();
        s.insert("unused", Tensor::ones([2])).unwrap();
        let mut g = Graph::new();
        let bound = s.bind(&mut g, true).unwrap();
        let sq = g.mul(bound.var(a), bound.var(a)).unwrap();
        let root = g.sum_all(sq).unwrap();
        g.backward(root).unwrap();
        let grads = s.gradients(&g, &bound).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 4.0]);
        assert_eq!(grads[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn he_init_has_expected_scale() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = Initializer::new(&mut s, &mut rng, "m.").he("w", &[64, 32, 3, 3], 1.0).unwrap();
        assert_eq!(s.name(id), "m.w");
        let t = s.get(id);
        let var = t.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / t.len() as f64;
        let want = 2.0 / (32.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
    }
}
