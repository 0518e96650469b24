//! Dense tensors, parameters, and the numeric kernels the networks are built from.

mod adam;
pub mod gradcheck;
pub mod init;
pub mod ops;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};

/// Row-major dense n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Scalar stored as a rank-1 tensor of length one.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn abs_sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v.abs())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// Copies sample `b` (along the leading axis) out of a batched tensor.
    pub fn sample(&self, b: usize) -> Tensor<T> {
        let per: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Keeps only the listed indices along `axis`, in the given order.
    pub fn index_select(&self, axis: usize, keep: &[usize]) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::shape("index_select", format!("axis {axis} of {:?}", self.shape)));
        }
        let extent = self.shape[axis];
        if keep.is_empty() || keep.iter().any(|&k| k >= extent) {
            return Err(Error::shape(
                "index_select",
                format!("indices {keep:?} for extent {extent}"),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            for &k in keep {
                let start = (o * extent + k) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Ok(Tensor { shape, data })
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::shape(
                op,
                format!("expected rank {rank}, got shape {:?}", self.shape),
            ));
        }
        Ok(())
    }
}

/// A learnable (or frozen) tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

// the accumulator is scratch space and not part of a parameter's identity
impl<T: PartialEq> PartialEq for Param<T> {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value && self.trainable == other.trainable
    }
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Named parameter collection. Names follow `<layer id>.<role>`, e.g. `conv1.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<T> {
    map: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param<T>) {
        self.map.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.map.values_mut().for_each(Param::zero_grad);
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.map.iter_mut() {
            p.trainable = pred(name);
        }
    }

    /// Order-sensitive FNV-1a digest over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, p) in &self.map {
            eat(name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, p)| (k.clone(), Param::new(p.value.cast(), p.trainable)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 4]).unwrap().len(), 4);
    }

    #[test]
    fn index_select_axes() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        let a = t.index_select(1, &[0, 2]).unwrap();
        assert_eq!(a.shape(), &[2, 2, 2]);
        assert_eq!(a.data(), &[0., 1., 4., 5., 6., 7., 10., 11.]);
        let b = t.index_select(0, &[1]).unwrap();
        assert_eq!(b.data(), &t.data()[6..]);
        assert!(t.index_select(1, &[3]).is_err());
        assert!(t.index_select(1, &[]).is_err());
    }

    #[test]
    fn zero_grad_resets() {
        let mut p = Param::new(Tensor::<f64>::full(&[3], 2.0), true);
        p.grad.fill(5.0);
        p.zero_grad();
        assert_eq!(p.grad, Tensor::zeros(&[3]));
        assert_eq!(p.grad.shape(), p.value.shape());
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut a = Params::<f32>::new();
        a.insert("w", Param::new(Tensor::full(&[2], 1.0), true));
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.get_mut("w").unwrap().value.data_mut()[1] = 1.0000001;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
