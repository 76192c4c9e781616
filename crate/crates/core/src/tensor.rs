//! Flat row-major tensors over a real scalar type.
//!
//! The scalar parameter doubles as the dtype tag: training runs on `f32`,
//! gradient checking on `f64`. No broadcasting beyond bias addition; every
//! op states its expected shapes so backward passes stay auditable.

use std::fmt;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar trait for the engine: `f32` or `f64`.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_v(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_v(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_v(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    /// Build a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "tensor shape {shape:?} expects {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![R::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: R) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<R>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D constructor from nested rows; rows must be rectangular.
    pub fn from_rows(rows: &[Vec<R>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows in tensor literal".into()));
        }
        let data = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) into {shape:?}",
                self.shape,
                self.numel()
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Number of rows when viewed as a batch (first dimension).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch row.
    pub fn row_width(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[R] {
        let w = self.row_width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(R, R) -> R) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_scaled(&mut self, other: &Self, scale: R) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }

    pub fn scale(&mut self, s: R) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: R) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> R {
        self.data.iter().fold(R::zero(), |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gather whole rows by index into a new tensor with the same row shape.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let w = self.row_width();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }

    /// Cast element-by-element into another scalar type.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| S::from_f64(v.to_f64_v()))
                .collect(),
        }
    }
}

/// `[B, n] x [n, m] -> [B, m]`
pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (ba, n) = dims2(a)?;
    let (n2, m) = dims2(b)?;
    if n != n2 {
        return Err(Error::Dimension(format!(
            "matmul inner dims differ: {n} vs {n2}"
        )));
    }
    let mut out = vec![R::zero(); ba * m];
    for i in 0..ba {
        let arow = &a.data[i * n..(i + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b.data[k * m..(k + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![ba, m], out)
}

/// `[B, m] x [n, m]^T -> [B, n]` (multiply by the transpose without materializing it).
pub fn matmul_nt<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (ba, m) = dims2(a)?;
    let (n, m2) = dims2(b)?;
    if m != m2 {
        return Err(Error::Dimension(format!(
            "matmul_nt inner dims differ: {m} vs {m2}"
        )));
    }
    let mut out = vec![R::zero(); ba * n];
    for i in 0..ba {
        let arow = &a.data[i * m..(i + 1) * m];
        for j in 0..n {
            let brow = &b.data[j * m..(j + 1) * m];
            let mut s = R::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![ba, n], out)
}

/// `[B, n]^T x [B, m] -> [n, m]`
pub fn matmul_tn<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (ba, n) = dims2(a)?;
    let (bb, m) = dims2(b)?;
    if ba != bb {
        return Err(Error::Dimension(format!(
            "matmul_tn batch dims differ: {ba} vs {bb}"
        )));
    }
    let mut out = vec![R::zero(); n * m];
    for i in 0..ba {
        let arow = &a.data[i * n..(i + 1) * n];
        let brow = &b.data[i * m..(i + 1) * m];
        for (j, &av) in arow.iter().enumerate() {
            let orow = &mut out[j * m..(j + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Column sums of a `[B, m]` tensor.
pub fn column_sums<R: Real>(a: &Tensor<R>) -> Result<Tensor<R>> {
    let (b, m) = dims2(a)?;
    let mut out = vec![R::zero(); m];
    for i in 0..b {
        for (o, &v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    Tensor::new(vec![m], out)
}

fn dims2<R: Real>(t: &Tensor<R>) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "expected 2-D tensor, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Index of the first maximum in a slice (ties resolve to the lowest index).
pub fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape_product() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f64; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0f64; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0f64, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0], vec![-1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[-2.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![7.0f64, 8.0, 9.0], vec![10.0, 11.0, 12.0]]).unwrap();
        // a: [3,2], b: [2,3]
        let ab = matmul(&a, &b).unwrap();
        // matmul_nt(a, b^T layout [3,2]) should equal ab
        let bt =
            Tensor::from_rows(&[vec![7.0f64, 10.0], vec![8.0, 11.0], vec![9.0, 12.0]]).unwrap();
        let ab2 = matmul_nt(&a, &bt).unwrap();
        assert_eq!(ab.data(), ab2.data());
        // matmul_tn(a^T layout, ...) : (a^T)^T b = a b
        let at = Tensor::from_rows(&[vec![1.0f64, 3.0, 5.0], vec![2.0, 4.0, 6.0]]).unwrap();
        let ab3 = matmul_tn(&at, &b).unwrap();
        assert_eq!(ab3.shape(), &[3, 3]);
        let full = matmul(&a, &b).unwrap();
        assert_eq!(ab3.data(), full.data());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0f64, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0f64, 2.0, 2.0]), 1);
    }

    #[test]
    fn gather_rows_copies_in_order() {
        let t = Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let g = t.gather_rows(&[2, 0]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
    }
}
