//! Dense rank-4 tensors in NCHW layout.
//!
//! Storage is reference counted so that recording a tensor on a [`Tape`]
//! or cloning a parameter set never copies the underlying buffer. Mutation
//! goes through [`Tensor::data_mut`], which copies on write when shared.
//!
//! [`Tape`]: crate::tape::Tape

use std::fmt::{self, Debug};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. `f32` is the training precision, `f64`
/// is used when checking gradients against finite differences.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `c = a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

fn check_span(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_span(a.len(), m, k, rsa, csa);
                check_span(b.len(), k, n, rsb, csb);
                check_span(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand span was bounds checked above and `c`
                // is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Tensor extents: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub const fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_batch(self, n: usize) -> Self {
        Shape { n, ..self }
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::dim(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: Arc::new(vec![value; shape.len()]) }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data: Arc::new(data) }
    }

    /// Column vector `len x 1 x 1 x 1`, the layout used for biases and
    /// per-channel batch-norm parameters.
    pub fn vector(values: Vec<T>) -> Self {
        let shape = Shape::new(values.len(), 1, 1, 1);
        Tensor { shape, data: Arc::new(values) }
    }

    pub fn scalar(value: T) -> Self {
        Self::vector(vec![value])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.len() != self.len() {
            return Err(Error::dim(format!("cannot reshape {} into {shape}", self.shape)));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape)?;
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data: Arc::new(data) })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k * other`, in place.
    pub fn axpy(&mut self, k: T, other: &Self) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a = *a + k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.is_empty() {
            return T::zero();
        }
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn l1_norm(&self) -> T {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect();
        Tensor { shape: self.shape, data: Arc::new(data) }
    }

    /// Flat values of batch item `i`.
    pub fn item(&self, i: usize) -> &[T] {
        let len = self.shape.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Batch item `i` as a `1 x C x H x W` tensor.
    pub fn item_tensor(&self, i: usize) -> Self {
        Tensor { shape: self.shape.with_batch(1), data: Arc::new(self.item(i).to_vec()) }
    }

    /// Gathers the batch items at `indices` into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.shape.item_len());
        for &i in indices {
            if i >= self.shape.n {
                return Err(Error::IndexOutOfRange { index: i, len: self.shape.n });
            }
            data.extend_from_slice(self.item(i));
        }
        Ok(Tensor { shape: self.shape.with_batch(indices.len()), data: Arc::new(data) })
    }

    /// Writes `items` into the batch slots at `indices`.
    pub fn scatter(&mut self, indices: &[usize], items: &Self) -> Result<()> {
        if items.shape.item_len() != self.shape.item_len() || items.shape.n != indices.len() {
            return Err(Error::dim(format!(
                "cannot scatter {} into {} at {} indices",
                items.shape,
                self.shape,
                indices.len()
            )));
        }
        let len = self.shape.item_len();
        let n = self.shape.n;
        let data = self.data_mut();
        for (k, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            data[i * len..(i + 1) * len].copy_from_slice(&items.data[k * len..(k + 1) * len]);
        }
        Ok(())
    }

    /// Concatenates tensors along the batch axis.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Empty("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape.item_len() != first.shape.item_len()
                || (p.shape.c, p.shape.h, p.shape.w) != (first.shape.c, first.shape.h, first.shape.w)
            {
                return Err(Error::dim(format!("cannot concatenate {} with {}", first.shape, p.shape)));
            }
            data.extend_from_slice(&p.data);
            n += p.shape.n;
        }
        Ok(Tensor { shape: first.shape.with_batch(n), data: Arc::new(data) })
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(format!("expected {shape}, got {}", self.shape)));
        }
        Ok(())
    }

    /// Per-channel mean over batch and space.
    pub fn channel_means(&self) -> Vec<T> {
        let s = self.shape;
        let mut acc = vec![T::zero(); s.c];
        for n in 0..s.n {
            for (c, a) in acc.iter_mut().enumerate() {
                let off = (n * s.c + c) * s.plane();
                *a = *a + self.data[off..off + s.plane()].iter().copied().sum::<T>();
            }
        }
        let count = T::from_usize((s.n * s.plane()).max(1)).unwrap();
        acc.into_iter().map(|v| v / count).collect()
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor({}, [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "])")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn gather_and_scatter() {
        let t = Tensor::<f32>::from_fn(Shape::new(3, 1, 1, 2), |n, _, _, w| (n * 10 + w) as f32);
        let g = t.gather(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[20.0, 21.0, 0.0, 1.0]);
        let mut z = Tensor::<f32>::zeros(t.shape());
        z.scatter(&[2, 0], &g).unwrap();
        assert_eq!(z.data(), &[0.0, 1.0, 0.0, 0.0, 20.0, 21.0]);
        assert!(t.gather(&[3]).is_err());
    }

    #[test]
    fn copy_on_write() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 4));
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 1.0);
    }

    #[test]
    fn gemm_with_transposed_operand() {
        // [1 2; 3 4] * [5 6; 7 8]^T
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, 2, 1, &b, 1, 2, 0.0, &mut c, 2, 1);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
