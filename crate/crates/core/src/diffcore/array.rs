use serde::{Deserialize, Serialize};

use super::DiffError;

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::Invalid {
                op: "ndarray",
                msg: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    /// Builds a 2-D array from equal-length rows. An empty slice gives shape `[0, cols]`.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self, DiffError> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(DiffError::Invalid {
                    op: "from_rows",
                    msg: format!("row of length {} in a {cols}-column array", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row `i` of a 2-D array.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn with_shape(mut self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &NdArray) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand's elements map onto a broadcast output.
#[derive(Debug)]
pub(crate) enum Bcast {
    Same,
    /// Operand is a suffix of the output; index is `i % len`.
    Cycle(usize),
    /// Operand repeats each value `inner` times; index is `i / inner`.
    Repeat(usize),
    General(Vec<usize>),
}

impl Bcast {
    pub(crate) fn new(input: &[usize], out: &[usize]) -> Self {
        let n_in: usize = input.iter().product();
        let n_out: usize = out.iter().product();
        if n_in == n_out {
            return Bcast::Same;
        }
        if n_in == 1 {
            return Bcast::Cycle(1);
        }
        let pad = out.len() - input.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(input.iter().copied()).collect();
        // suffix: leading dims of operand are all 1, trailing dims equal to output
        if let Some(first) = padded.iter().position(|&d| d != 1) {
            if padded[first..] == out[first..] {
                return Bcast::Cycle(n_in);
            }
        }
        // prefix: trailing dims of operand are all 1, leading dims equal to output
        if let Some(last) = padded.iter().rposition(|&d| d != 1) {
            if padded[..=last] == out[..=last] && padded[last + 1..].iter().all(|&d| d == 1) {
                return Bcast::Repeat(out[last + 1..].iter().product());
            }
        }
        let mut strides = vec![0usize; out.len()];
        let mut acc = 1;
        for i in (0..out.len()).rev() {
            if padded[i] != 1 {
                strides[i] = acc;
            }
            acc *= padded[i];
        }
        let mut index = Vec::with_capacity(n_out);
        let mut counter = vec![0usize; out.len()];
        let mut offset = 0usize;
        for _ in 0..n_out {
            index.push(offset);
            for d in (0..out.len()).rev() {
                counter[d] += 1;
                offset += strides[d];
                if counter[d] < out[d] {
                    break;
                }
                offset -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        Bcast::General(index)
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Repeat(inner) => i / inner,
            Bcast::General(idx) => idx[i],
        }
    }
}

/// Sums `grad` (output-shaped) back into an operand of shape `input`.
pub(crate) fn reduce_broadcast(grad: &[f64], input: &[usize], map: &Bcast) -> NdArray {
    if let Bcast::Same = map {
        return NdArray {
            shape: input.to_vec(),
            data: grad.to_vec(),
        };
    }
    let mut out = NdArray::zeros(input);
    for (i, g) in grad.iter().enumerate() {
        out.data[map.at(i)] += g;
    }
    out
}

/// `c[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,k] = a[m,n] * b[k,n]^T`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul(a, &bt, m, n, k)
}

/// `c[k,n] = a[m,k]^T * b[m,n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}
