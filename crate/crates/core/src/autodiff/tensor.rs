use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Most of the crate works with rank-2 tensors; a rank-1 tensor of length
/// `n` is treated as a `1 x n` row wherever a matrix is expected.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape must be non-empty with positive extents, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * c);
        for r in rows {
            let r = r.as_ref();
            if r.len() != c {
                return Err(Error::invalid("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, c], data)
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

    /// `(rows, cols)` view. Rank-1 is a single row; higher ranks fold the
    /// leading dimensions into rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap();
                (self.data.len() / c, c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        // `x * 0` is NaN exactly when `x` is infinite or NaN; the sum form
        // vectorizes where a short-circuiting scan does not.
        self.data.iter().fold(0.0, |acc, &v| acc + v * 0.0) == 0.0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

/// Rows with Euclidean norm below this are left untouched by
/// [`l2_normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

pub fn l2_normalize_row(row: &mut [f64]) -> f64 {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n >= NORM_FLOOR {
        row.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Divide each row by its Euclidean norm.
pub fn l2_normalize_rows(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    let rows = out.rows();
    for r in 0..rows {
        l2_normalize_row(out.row_slice_mut(r));
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) type GemmFn =
    fn(usize, usize, usize, &[f64], (usize, usize), &[f64], (usize, usize), f64, &mut [f64]);

/// `c = op(a) * op(b) + beta * c` over raw strided storage.
///
/// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n` with strides
/// `(rsb, csb)`, and `c` is a dense row-major `m x n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above bound every index touched by the kernel
    // inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// [`gemm`] with the product formed in `f32`. Accumulation into `c` is `f64`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_f32(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let af: Vec<f32> = a.iter().map(|&x| x as f32).collect();
    let bf: Vec<f32> = b.iter().map(|&x| x as f32).collect();
    let mut cf = vec![0.0f32; m * n];
    // SAFETY: same bounds as `gemm`; the f32 copies have the source lengths.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            af.as_ptr(),
            rsa as isize,
            csa as isize,
            bf.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            cf.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    if beta == 0.0 {
        c.iter_mut().zip(&cf).for_each(|(x, &y)| *x = y as f64);
    } else {
        c.iter_mut().zip(&cf).for_each(|(x, &y)| *x = beta * *x + y as f64);
    }
}
