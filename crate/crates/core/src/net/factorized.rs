use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Kernel layout of a factorized convolution: `u` is `(h·w·c_in) × r` and
/// `v` is `c_out × r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelShape {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
}

/// A weight `W = U Vᵀ` stored as its two factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedParam {
    pub u: Matrix,
    pub v: Matrix,
    pub kernel: Option<KernelShape>,
}

impl FactorizedParam {
    pub fn new(u: Matrix, v: Matrix) -> Result<Self> {
        if u.cols() != v.cols() {
            return Err(Error::shape(format!(
                "factor ranks disagree: U is {}x{}, V is {}x{}",
                u.rows(),
                u.cols(),
                v.rows(),
                v.cols()
            )));
        }
        Ok(Self { u, v, kernel: None })
    }

    pub fn with_kernel(mut self, kernel: KernelShape) -> Result<Self> {
        if self.u.rows() != kernel.h * kernel.w * kernel.c_in || self.v.rows() != kernel.c_out {
            return Err(Error::shape(format!("factors do not match kernel {kernel:?}")));
        }
        self.kernel = Some(kernel);
        Ok(self)
    }

    /// All-zero factors of rank `r` for an `m × n` weight.
    pub fn zeros(m: usize, n: usize, r: usize) -> Result<Self> {
        if r == 0 || r > m.min(n) {
            return Err(Error::Rank { rank: r, max: m.min(n) });
        }
        Self::new(Matrix::zeros(m, r), Matrix::zeros(n, r))
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// `(m, n)` of the composed weight.
    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    pub fn compose(&self) -> Matrix {
        self.u.matmul_t(&self.v).expect("factor ranks checked at construction")
    }
}
