use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, flat parameter arrays. Layers hold [`ParamId`]s into a set; the
/// set is what optimizers update and checkpoints store.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), values.len(), "param {name}");
        assert!(!self.names.contains(&name), "duplicate param {name}");
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        ParamId(self.values.len() - 1)
    }

    /// Adds a parameter drawn from `U(-bound, bound)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, shape, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.values)
            .map(|((n, s), v)| (n.as_str(), s.as_slice(), v.as_slice()))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            values: self.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names || self.shapes != other.shapes {
            return Err(Error::Shape("parameter layout differs from the architecture".into()));
        }
        self.values.clone_from(&other.values);
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact value bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape, vals) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((shape.len() as u64).to_le_bytes());
            for s in shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

/// Gradient buffers laid out like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a, b);
        if a.0 < b.0 {
            let (lo, hi) = self.values.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.values.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.iter().map(Vec::as_slice)
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    /// Name of the first tensor holding a non-finite gradient.
    pub fn first_non_finite<'p>(&self, params: &'p ParamSet) -> Option<&'p str> {
        self.values
            .iter()
            .position(|g| g.iter().any(|v| !v.is_finite()))
            .map(|i| params.name(ParamId(i)))
    }
}
