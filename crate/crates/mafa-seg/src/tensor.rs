//! Dense 4-d tensor used for activations (N, H, W, C) and conv kernels
//! (kh, kw, in, out). Row-major, innermost dimension last.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "tensor dims {:?} need {} values, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Batch size for activation tensors.
    pub fn n(&self) -> usize {
        self.dims[0]
    }
    pub fn h(&self) -> usize {
        self.dims[1]
    }
    pub fn w(&self) -> usize {
        self.dims[2]
    }
    pub fn c(&self) -> usize {
        self.dims[3]
    }

    #[inline]
    pub fn idx(&self, n: usize, i: usize, j: usize, k: usize) -> usize {
        ((n * self.dims[1] + i) * self.dims[2] + j) * self.dims[3] + k
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(n, i, j, k)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, i: usize, j: usize, k: usize) -> &mut f64 {
        let p = self.idx(n, i, j, k);
        &mut self.data[p]
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        self.dims == other.dims
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise in-place accumulation. Panics on shape mismatch.
    pub fn add_assign(&mut self, other: &Tensor4) {
        assert_eq!(self.dims, other.dims, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// One image (n = 1) slice of a batched activation tensor.
    pub fn slice_batch(&self, n: usize) -> Tensor4 {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stack single-image tensors along the batch dimension.
    pub fn stack_batch(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack_batch: empty list".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.dims[1..] != first.dims[1..] || t.dims[0] != 1 {
                return Err(Error::ShapeMismatch("stack_batch: inconsistent shapes".into()));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            dims: [items.len(), first.dims[1], first.dims[2], first.dims[3]],
            data,
        })
    }

    /// Concatenate along the channel dimension.
    pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
        if a.dims[0] != b.dims[0] || a.dims[1] != b.dims[1] || a.dims[2] != b.dims[2] {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels: {:?} vs {:?}",
                a.dims, b.dims
            )));
        }
        let (ca, cb) = (a.dims[3], b.dims[3]);
        let mut out = Tensor4::zeros([a.dims[0], a.dims[1], a.dims[2], ca + cb]);
        let px = a.dims[0] * a.dims[1] * a.dims[2];
        for p in 0..px {
            out.data[p * (ca + cb)..p * (ca + cb) + ca]
                .copy_from_slice(&a.data[p * ca..(p + 1) * ca]);
            out.data[p * (ca + cb) + ca..(p + 1) * (ca + cb)]
                .copy_from_slice(&b.data[p * cb..(p + 1) * cb]);
        }
        Ok(out)
    }

    /// Inverse of [`Tensor4::concat_channels`].
    pub fn split_channels(x: &Tensor4, ca: usize) -> (Tensor4, Tensor4) {
        let cb = x.dims[3] - ca;
        let mut a = Tensor4::zeros([x.dims[0], x.dims[1], x.dims[2], ca]);
        let mut b = Tensor4::zeros([x.dims[0], x.dims[1], x.dims[2], cb]);
        let px = x.dims[0] * x.dims[1] * x.dims[2];
        for p in 0..px {
            a.data[p * ca..(p + 1) * ca].copy_from_slice(&x.data[p * (ca + cb)..p * (ca + cb) + ca]);
            b.data[p * cb..(p + 1) * cb]
                .copy_from_slice(&x.data[p * (ca + cb) + ca..(p + 1) * (ca + cb)]);
        }
        (a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor4::from_vec([1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let b = Tensor4::from_vec([1, 2, 2, 1], (8..12).map(|v| v as f64).collect()).unwrap();
        let cat = Tensor4::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.at(0, 1, 1, 2), 11.0);
        let (a2, b2) = Tensor4::split_channels(&cat, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn stack_and_slice() {
        let a = Tensor4::filled([1, 2, 2, 1], 1.0);
        let b = Tensor4::filled([1, 2, 2, 1], 2.0);
        let s = Tensor4::stack_batch(&[a.clone(), b]).unwrap();
        assert_eq!(s.dims, [2, 2, 2, 1]);
        assert_eq!(s.slice_batch(0), a);
        assert_eq!(s.at(1, 0, 0, 0), 2.0);
    }
}
