use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable values of a model in one contiguous vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    values: Vec<T>,
    slots: Vec<Slot>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            slots: Vec::new(),
        }
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        self.push(name.into(), shape, vec![T::zero(); n])
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.push(name.into(), shape, vec![T::lit(v); n])
    }

    /// Normal initialization with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::lit(z * std)
            })
            .collect();
        self.push(name.into(), shape, data)
    }

    fn push(&mut self, name: String, shape: &[usize], data: Vec<T>) -> ParamId {
        let id = ParamId(self.slots.len());
        self.slots.push(Slot {
            name,
            offset: self.values.len(),
            shape: shape.to_vec(),
        });
        self.values.extend(data);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn slot(&self, id: ParamId) -> &Slot {
        &self.slots[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        let s = &self.slots[id.0];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        let s = &self.slots[id.0];
        let (a, b) = (s.offset, s.offset + s.len());
        &mut self.values[a..b]
    }

    /// Matrix view; higher-rank slots are flattened to `(shape[0], rest)`.
    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, T> {
        let s = &self.slots[id.0];
        let rows = s.shape[0];
        ArrayView2::from_shape((rows, s.len() / rows.max(1)), self.get(id)).expect("slot shape")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, T> {
        ArrayView1::from(self.get(id))
    }

    pub fn grads(&self) -> Grads<T> {
        Grads {
            values: vec![T::zero(); self.values.len()],
            slots: self.slots.clone(),
        }
    }
}

/// Gradient buffer laid out like its [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    values: Vec<T>,
    slots: Vec<Slot>,
}

impl<T: Scalar> Grads<T> {
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        let s = &self.slots[id.0];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        let s = &self.slots[id.0];
        let (a, b) = (s.offset, s.offset + s.len());
        &mut self.values[a..b]
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, T> {
        let s = &self.slots[id.0];
        let rows = s.shape[0];
        let cols = s.len() / rows.max(1);
        ArrayViewMut2::from_shape((rows, cols), self.get_mut(id)).expect("slot shape")
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, T> {
        ArrayViewMut1::from(self.get_mut(id))
    }

    pub fn add(&mut self, other: &Grads<T>) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: T) {
        for a in &mut self.values {
            *a *= k;
        }
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn zero(&mut self) {
        self.values.fill(T::zero());
    }
}
