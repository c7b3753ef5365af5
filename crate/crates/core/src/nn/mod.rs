//! Minimal dense CPU tensor kernels used by the reconstruction and refinement networks.
//!
//! Activations are stored channel-major (`[C, N, H, W]`) so that convolutions lower to a
//! single GEMM over the whole batch and batch-norm statistics are contiguous per channel.
//! Fully connected activations use the same container with `h == w == 1`.

mod layers;
mod optim;

pub use layers::{BatchNorm, Block, Conv2d, ConvTranspose2d, Linear, Op};
pub use optim::Adam;

use std::fmt::Debug;

use rand::Rng;

/// Floating point element type of a network. Production code runs in `f32`; gradient checks
/// instantiate the same layers in `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Default
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    /// `c = alpha * a * b + beta * c` on raw strided matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices of the given sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major `C (m×n) = op(A) (m×k) · op(B) (k×n)`, optionally accumulating into `C`.
///
/// `a_t` means `A` is stored as `k×m`; `b_t` means `B` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_t: bool,
    b: &[F],
    b_t: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong size");
    assert_eq!(b.len(), k * n, "gemm: B has wrong size");
    assert_eq!(c.len(), m * n, "gemm: C has wrong size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    // SAFETY: sizes asserted above; `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        F::gemm_raw(m, k, n, F::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Dense activation in channel-major layout `[c, n, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Tensor { c, n, h, w, data: vec![F::zero(); c * n * h * w] }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length mismatch");
        Tensor { c, n, h, w, data }
    }

    /// Build a single-channel batch from per-sample planes of `h*w` values.
    pub fn from_planes(planes: &[&[F]], h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            assert_eq!(p.len(), h * w, "plane size mismatch");
            data.extend_from_slice(p);
        }
        Tensor::from_vec(1, planes.len(), h, w, data)
    }

    /// Stack several single-channel batches of equal geometry as input channels.
    pub fn stack_channels(parts: &[Tensor<F>]) -> Self {
        let first = &parts[0];
        let mut data = Vec::with_capacity(parts.len() * first.data.len());
        for p in parts {
            assert!(
                p.c == 1 && p.n == first.n && p.h == first.h && p.w == first.w,
                "stack_channels: geometry mismatch"
            );
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(parts.len(), first.n, first.h, first.w, data)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Values of channel `c`, sample `n`.
    pub fn sample_plane(&self, c: usize, n: usize) -> &[F] {
        let hw = self.plane();
        let start = (c * self.n + n) * hw;
        &self.data[start..start + hw]
    }

    /// `[c, n, h, w] -> [c*h*w, n, 1, 1]`.
    pub fn flatten(&self) -> Self {
        let hw = self.plane();
        let feat = self.c * hw;
        let mut out = vec![F::zero(); feat * self.n];
        for ci in 0..self.c {
            for ni in 0..self.n {
                let src = &self.data[(ci * self.n + ni) * hw..][..hw];
                for (s, v) in src.iter().enumerate() {
                    out[(ci * hw + s) * self.n + ni] = *v;
                }
            }
        }
        Tensor::from_vec(feat, self.n, 1, 1, out)
    }

    /// Inverse of [`Tensor::flatten`].
    pub fn unflatten(&self, c: usize, h: usize, w: usize) -> Self {
        assert_eq!(self.c, c * h * w, "unflatten: feature size mismatch");
        let hw = h * w;
        let n = self.n;
        let mut out = vec![F::zero(); self.data.len()];
        for ci in 0..c {
            for ni in 0..n {
                let dst = &mut out[(ci * n + ni) * hw..][..hw];
                for (s, v) in dst.iter_mut().enumerate() {
                    *v = self.data[(ci * hw + s) * n + ni];
                }
            }
        }
        Tensor::from_vec(c, n, h, w, out)
    }
}

/// A named tensor of a network: trainable weight or persistent buffer (batch-norm statistics).
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub trainable: bool,
}

impl<F: Real> Param<F> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<F>, trainable: bool) -> Self {
        let len = shape.iter().product::<usize>();
        assert_eq!(len, value.len(), "param value length mismatch");
        Param { name: name.into(), shape, grad: vec![F::zero(); if trainable { len } else { 0 }], value, trainable }
    }

    /// PyTorch-style default init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub(crate) fn uniform(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let len = shape.iter().product::<usize>();
        let value = (0..len).map(|_| F::lit((2.0 * rng.random::<f64>() - 1.0) * bound)).collect();
        Param::new(name, shape, value, true)
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: f64, trainable: bool) -> Self {
        let len = shape.iter().product::<usize>();
        Param::new(name, shape, vec![F::lit(v); len], trainable)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}
