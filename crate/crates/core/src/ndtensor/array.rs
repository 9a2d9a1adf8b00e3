//! Dense row-major f64 arrays with NumPy-style broadcasting helpers.

use crate::error::{Error, Result};

/// A dense, contiguous, row-major array of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Domain {
                op: "ndarray-new",
                detail: format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// 0-dimensional scalar.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 1-D array from a vec.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }

    /// Value at a 2-D index; panics on rank mismatch.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j]
    }
}

/// Boolean validity mask, broadcastable against value arrays.
/// `true` marks a valid (unmasked) position.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != bits.len() {
            return Err(Error::Domain {
                op: "mask-new",
                detail: format!("shape {shape:?} implies {numel} bits, got {}", bits.len()),
            });
        }
        Ok(Self { shape, bits })
    }

    pub fn all_valid(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            bits: vec![true; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Inserts size-1 axes so the mask broadcasts against a higher-rank tensor.
    /// `positions` are axis indices in the *output* shape.
    pub fn unsqueeze(&self, positions: &[usize]) -> Mask {
        let out_rank = self.shape.len() + positions.len();
        let mut shape = Vec::with_capacity(out_rank);
        let mut src = self.shape.iter();
        for axis in 0..out_rank {
            if positions.contains(&axis) {
                shape.push(1);
            } else {
                shape.push(*src.next().expect("unsqueeze positions out of range"));
            }
        }
        Mask {
            shape,
            bits: self.bits.clone(),
        }
    }
}

/// Broadcast result shape of two operand shapes, or None if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        if da == db || da == 1 || db == 1 {
            out[d] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides (in elements) for a shape.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Strides of an operand aligned to a broadcast output shape;
/// broadcast dimensions get stride 0.
pub fn broadcast_strides(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - operand.len();
    let base = strides_for(operand);
    let mut out_strides = vec![0usize; rank];
    for d in 0..rank {
        if d >= offset {
            let od = d - offset;
            out_strides[d] = if operand[od] == 1 { 0 } else { base[od] };
        }
    }
    out_strides
}

/// Walks the output shape in row-major order, yielding flat offsets into the
/// output and into two broadcast-aligned operands.
pub fn for_each_broadcast2<F: FnMut(usize, usize, usize)>(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: F,
) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut coords = vec![0usize; rank];
    let mut ai = 0usize;
    let mut bi = 0usize;
    for oi in 0..numel {
        f(oi, ai, bi);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if coords[d] < out[d] {
                break;
            }
            coords[d] = 0;
            ai -= sa[d] * out[d];
            bi -= sb[d] * out[d];
        }
    }
}

/// Single-operand variant of [`for_each_broadcast2`].
pub fn for_each_broadcast1<F: FnMut(usize, usize)>(out: &[usize], a: &[usize], mut f: F) {
    for_each_broadcast2(out, a, &[], |oi, ai, _| f(oi, ai));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_follow_numpy_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[], &[4]), Some(vec![4]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn broadcast_walk_matches_manual_expansion() {
        // a: [2,1] = [[10],[20]], b: [1,3] = [[1,2,3]]
        let mut sums = Vec::new();
        let a = [10.0, 20.0];
        let b = [1.0, 2.0, 3.0];
        for_each_broadcast2(&[2, 3], &[2, 1], &[1, 3], |_, ai, bi| {
            sums.push(a[ai] + b[bi]);
        });
        assert_eq!(sums, vec![11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn scalar_broadcast_offsets_stay_zero() {
        let mut offsets = Vec::new();
        for_each_broadcast2(&[2, 2], &[], &[2, 2], |oi, ai, bi| offsets.push((oi, ai, bi)));
        assert_eq!(offsets[3], (3, 0, 3));
    }
}
