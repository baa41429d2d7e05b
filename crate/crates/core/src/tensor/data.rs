//! Plain dense tensors: a shape plus row-major data. Autodiff lives on the
//! tape ([`crate::tensor::tape`]); this type is the storage that parameters,
//! checkpoints, and shards move around in.

use crate::tensor::scalar::Scalar;
use crate::{Error, Result};

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::ZERO; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<T>) {
        (self.shape, self.data)
    }

    /// Element cast between precisions (f32 <-> f64) through f64.
    pub fn cast<U: Scalar>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// Splits along `axis` into `parts` equal blocks. The inverse of
    /// [`TensorData::concat`] along the same axis.
    pub fn split(&self, axis: usize, parts: usize) -> Result<Vec<TensorData<T>>> {
        if axis >= self.shape.len() {
            return Err(Error::Shape(format!(
                "split axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        let dim = self.shape[axis];
        if parts == 0 || dim % parts != 0 {
            return Err(Error::Shape(format!(
                "cannot split axis of size {} into {} equal parts",
                dim, parts
            )));
        }
        let piece = dim / parts;
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(parts);
        for p in 0..parts {
            let mut shape = self.shape.clone();
            shape[axis] = piece;
            let mut data = Vec::with_capacity(outer * piece * inner);
            for o in 0..outer {
                let base = o * dim * inner + p * piece * inner;
                data.extend_from_slice(&self.data[base..base + piece * inner]);
            }
            out.push(TensorData { shape, data });
        }
        Ok(out)
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[TensorData<T>], axis: usize) -> Result<TensorData<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        if axis >= first.shape.len() {
            return Err(Error::Shape(format!(
                "concat axis {} out of range for shape {:?}",
                axis, first.shape
            )));
        }
        let mut total_axis = 0;
        for p in parts {
            if p.shape.len() != first.shape.len() {
                return Err(Error::Shape("concat rank mismatch".into()));
            }
            for (d, (a, b)) in p.shape.iter().zip(first.shape.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::Shape(format!(
                        "concat shape mismatch at dim {}: {:?} vs {:?}",
                        d, p.shape, first.shape
                    )));
                }
            }
            total_axis += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let dim = p.shape[axis];
                let base = o * dim * inner;
                data.extend_from_slice(&p.data[base..base + dim * inner]);
            }
        }
        Ok(TensorData { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_concat_roundtrip() {
        let t = TensorData::new(vec![2, 4], (0..8).map(|i| i as f64).collect()).unwrap();
        let parts = t.split(1, 2).unwrap();
        assert_eq!(parts[0].data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(parts[1].data(), &[2.0, 3.0, 6.0, 7.0]);
        let back = TensorData::concat(&parts, 1).unwrap();
        assert_eq!(back, t);

        let rows = t.split(0, 2).unwrap();
        assert_eq!(rows[0].data(), &[0.0, 1.0, 2.0, 3.0]);
        let back = TensorData::concat(&rows, 0).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn split_rejects_uneven() {
        let t = TensorData::<f32>::zeros(vec![2, 3]);
        assert!(t.split(1, 2).is_err());
    }
}
