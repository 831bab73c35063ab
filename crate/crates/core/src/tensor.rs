//! Dense four-dimensional `f32` tensors in NCHW row-major layout.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: f32) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "tensor",
                format!("{expected} elements for dims {dims:?}"),
                data.len(),
            ));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Number of elements in one slice along dim 0.
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    /// Elements in one `d2 x d3` plane.
    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    #[inline]
    pub fn offset(&self, i0: usize, i1: usize, i2: usize, i3: usize) -> usize {
        debug_assert!(i0 < self.dims[0] && i1 < self.dims[1] && i2 < self.dims[2] && i3 < self.dims[3]);
        ((i0 * self.dims[1] + i1) * self.dims[2] + i2) * self.dims[3] + i3
    }

    #[inline]
    pub fn at(&self, i0: usize, i1: usize, i2: usize, i3: usize) -> f32 {
        self.data[self.offset(i0, i1, i2, i3)]
    }

    #[inline]
    pub fn set(&mut self, i0: usize, i1: usize, i2: usize, i3: usize, value: f32) {
        let off = self.offset(i0, i1, i2, i3);
        self.data[off] = value;
    }

    /// Contiguous slice for item `i0` along dim 0.
    pub fn item(&self, i0: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[i0 * n..(i0 + 1) * n]
    }

    pub fn item_mut(&mut self, i0: usize) -> &mut [f32] {
        let n = self.item_len();
        &mut self.data[i0 * n..(i0 + 1) * n]
    }

    /// Returns a copy with dims reinterpreted; the element count must match.
    pub fn reshaped(&self, dims: [usize; 4]) -> Result<Self> {
        Tensor4::from_vec(dims, self.data.clone())
    }

    /// Gathers the given dim-0 items into a new tensor.
    pub fn select_items(&self, indices: &[usize]) -> Self {
        let n = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Tensor4 {
            dims: [indices.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
        }
    }

    /// Keeps only the listed indices along dim 0 and dim 1, in the given order.
    pub fn select(&self, keep0: &[usize], keep1: &[usize]) -> Self {
        let plane = self.plane_len();
        let mut data = Vec::with_capacity(keep0.len() * keep1.len() * plane);
        for &i in keep0 {
            for &j in keep1 {
                let off = self.offset(i, j, 0, 0);
                data.extend_from_slice(&self.data[off..off + plane]);
            }
        }
        Tensor4 {
            dims: [keep0.len(), keep1.len(), self.dims[2], self.dims[3]],
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor4::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor4::from_vec([1, 2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor4::from_vec([2, 3, 4, 5], (0..120).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(1, 2, 3, 4), 119.0);
        assert_eq!(t.at(0, 1, 0, 0), 20.0);
        assert_eq!(t.at(1, 0, 0, 0), 60.0);
    }

    #[test]
    fn select_keeps_requested_rows_and_columns() {
        let t = Tensor4::from_vec([3, 2, 1, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let s = t.select(&[0, 2], &[1]);
        assert_eq!(s.dims(), [2, 1, 1, 1]);
        assert_eq!(s.data(), &[1.0, 5.0]);
    }
}
