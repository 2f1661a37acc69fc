use crate::error::{Error, Result};
use crate::numerics::Real;

/// Dense row-major tensor.
///
/// `grad`, when present, is congruent with `data`. Constructors reject
/// non-finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor data")?;
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(F::one());
        t
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// invariant (used on hot paths whose inputs were already checked).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| G::of(x.f64())).collect()),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        check_finite(&self.data, "tensor data")
    }
}

pub(crate) fn check_finite<F: Real>(xs: &[F], what: &str) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(format!(
            "{what} has non-finite value {} at index {i}",
            xs[i]
        ))),
    }
}

/// Plain matrix product on values, outside any autodiff graph.
pub fn matmul_values<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    use crate::numerics::real::{gemm, Layout};
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul of {m}x{k} by {k2}x{n}"
        )));
    }
    let mut out = vec![F::zero(); m * n];
    gemm(
        F::one(),
        a.data(),
        Layout::row_major(m, k),
        b.data(),
        Layout::row_major(k, n),
        F::zero(),
        &mut out,
        Layout::row_major(m, n),
    );
    let t = Tensor::from_parts(vec![m, n], out);
    t.check_finite()?;
    Ok(t)
}

/// Softmax of a rank-2 tensor along `axis` (0 or 1), max-subtracted, with
/// the normalizer accumulated in `f64`.
pub fn softmax_values<F: Real>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (r, c) = match x.shape().len() {
        1 => (1, x.len()),
        _ => x.dims2()?,
    };
    x.check_finite()?;
    let mut out = x.data().to_vec();
    match axis {
        1 => {
            for row in out.chunks_mut(c.max(1)) {
                softmax_in_place(row);
            }
        }
        0 => {
            let mut col = vec![F::zero(); r];
            for j in 0..c {
                for i in 0..r {
                    col[i] = out[i * c + j];
                }
                softmax_in_place(&mut col);
                for i in 0..r {
                    out[i * c + j] = col[i];
                }
            }
        }
        _ => {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} on shape {:?}",
                x.shape()
            )))
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.f64();
    }
    let inv = F::of(1.0 / sum);
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Log-softmax of one row: `x - max - ln(sum(exp(x - max)))`.
pub(crate) fn log_softmax_row<F: Real>(row: &[F], out: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let sum: f64 = row.iter().map(|&v| (v - max).f64().exp()).sum();
    let lse = max + F::of(sum.ln());
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let err = Tensor::new(vec![2], vec![1.0f32, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn softmax_uniform_and_hand_value() {
        let x = Tensor::new(vec![1, 4], vec![2.0f64; 4]).unwrap();
        let p = softmax_values(&x, 1).unwrap();
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let x = Tensor::new(vec![1, 2], vec![0.0f64, 3f64.ln()]).unwrap();
        let p = softmax_values(&x, 1).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_along_columns() {
        let x = Tensor::new(vec![2, 2], vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let p = softmax_values(&x, 0).unwrap();
        for &v in p.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = Tensor::from_fn(&[3, 3], |i| i as f64 * 0.5 - 1.0).unwrap();
        let id = Tensor::identity(3);
        assert_eq!(matmul_values(&id, &m).unwrap().data(), m.data());
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let m4 = Tensor::from_fn(&[3, 4], |i| i as f64).unwrap();
        let out = matmul_values(&z, &m4).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
