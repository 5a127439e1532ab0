//! A deliberately small neural network toolkit: row-major tensors, layers
//! with explicit backward passes, Adam, losses, and a checkpoint format.
//!
//! Everything is generic over [`Real`] so the same model can be trained in
//! `f32` and gradient-checked in `f64`.

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;

pub use layers::{Conv2d, ConvTranspose2d, Gelu, InstanceNorm, Linear, Mlp, Sigmoid, Upsample2x};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("BCE target {0} is not 0 or 1")]
    BadTarget(f64),
    #[error("backward called before forward")]
    NoForward,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: &[usize], got: &[usize]) -> Error {
    Error::Shape {
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

/// Scalar type of tensors.
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// `c = a·b + beta·c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
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
    fn erf(self) -> Self;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $erf:path) => {
        impl Real for $t {
            fn gemm_raw(
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
                if m == 0 || n == 0 {
                    return;
                }
                let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows as isize - 1) * rs + (cols as isize - 1) * cs
                };
                if k > 0 {
                    assert!(last(m, k, rsa, csa) < a.len() as isize);
                    assert!(last(k, n, rsb, csb) < b.len() as isize);
                }
                assert!(last(m, n, rsc, csc) < c.len() as isize);
                // SAFETY: the bounds of every operand were checked above and
                // `c` does not alias `a` or `b` (distinct borrows).
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
                    )
                }
            }

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, fast_erff);
impl_real!(f64, matrixmultiply::dgemm, libm::erf);

/// Branch-free rational erf for f32: odd numerator over even denominator
/// on [-4, 4], where erf already rounds to ±1. Max error about 2 ulp, and
/// unlike `erff` the loop vectorizes.
#[inline]
pub fn fast_erff(v: f32) -> f32 {
    let x = v.clamp(-4.0, 4.0);
    let x2 = x * x;
    let mut p = x2 * -2.726_142_3e-10 + 2.770_681_4e-8;
    p = x2 * p + -2.101_024e-6;
    p = x2 * p + -5.692_506_4e-5;
    p = x2 * p + -7.349_906_3e-4;
    p = x2 * p + -2.954_6e-3;
    p = x2 * p + -1.609_603_3e-2;
    let mut q = x2 * -1.456_607_2e-5 + -2.133_740_6e-4;
    q = x2 * q + -1.682_827e-3;
    q = x2 * q + -7.373_329e-3;
    q = x2 * q + -1.426_474e-2;
    x * p / q
}

/// Row-major matrix product `c (+)= op(a)·op(b)` where `op` optionally
/// transposes. `a` is `m×k` after `op`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_raw(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Tensor<T> {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(&[n], &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Tensor<T>> {
        Tensor::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(shape_err(&[0, 0], &self.shape)),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err(&[0, 0, 0, 0], &self.shape)),
        }
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err(shape, &self.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, o: &Tensor<T>) -> Result<Tensor<T>> {
        o.expect_shape(&self.shape)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&o.data).map(|(a, b)| *a + *b).collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `c` of sample `n` in an NCHW tensor.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let (_, ch, h, w) = self.dims4().expect("NCHW tensor");
        let s = (n * ch + c) * h * w;
        &self.data[s..s + h * w]
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>, decay: bool) -> Param<T> {
        let grad = vec![T::zero(); value.len()];
        Param { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything owning parameters. Visiting order must be stable: optimizer
/// state and checkpoints are matched by position and name.
pub trait Module<T: Real> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }

    /// Sets whether weight decay applies to every parameter of the module.
    fn set_decay(&mut self, decay: bool) {
        self.visit_params("", &mut |_, p| p.decay = decay);
    }
}

/// A differentiable operator that caches what its backward pass needs.
pub trait Layer<T: Real>: Module<T> {
    /// Pure evaluation without caching.
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// Evaluation that records state for [`Layer::backward`].
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// Returns the input gradient and accumulates parameter gradients.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic generator for initialisation.
pub fn init_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
